//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the tape from the loss node towards the leaves, so the order of
//! gradient accumulation is fixed by the order of recording and results are
//! bit-reproducible.

use super::tensor::{numel, Tensor};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-axis linear interpolation taps: `(lo, hi, w_lo, w_hi)` per output index.
type Taps<T> = Vec<(usize, usize, T, T)>;

enum Op<T> {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulScalar(Var, T),
    AddScalar(Var),
    MulConst(Var, Vec<T>),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MatMul(Var, Var, [usize; 3]),
    SoftmaxRows(Var),
    RowNorm(Var, Vec<T>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest(Var, usize),
    UpsampleTrilinear(Var, [Taps<T>; 3]),
    Concat0(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Var, Vec<usize>),
    Bilinear(Var, Var),
    GroupWeightedSum(Var, Var),
    ScaleRows(Var, Vec<T>),
    BceLogitsMean(Var, Vec<T>),
    WeightedCe {
        logits: Var,
        labels: Vec<Option<usize>>,
        weights: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of a scalar with respect to every tracked node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); tape.value(v).len()],
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for each destination element of a permutation.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * src_strides[p]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// Half-pixel-centred linear taps for upsampling `n_in` to `n_out` samples.
fn linear_taps<T: Real>(n_in: usize, n_out: usize) -> Taps<T> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, T::of(1.0 - frac), T::of(frac))
        })
        .collect()
}

/// Bilinear corners of `(u, v)` on a `rows x cols` grid: `(offset, weight, du, dv)`.
/// Corners outside the grid are omitted, which realises zero padding.
fn bilinear_corners<T: Real>(u: T, v: T, rows: usize, cols: usize) -> ([(usize, T, T, T); 4], usize) {
    let mut out = [(0usize, T::zero(), T::zero(), T::zero()); 4];
    let mut n = 0;
    if !u.is_finite() || !v.is_finite() {
        return (out, 0);
    }
    let uf = u.floor();
    let vf = v.floor();
    let lim = T::of(1e9);
    if uf.abs() > lim || vf.abs() > lim {
        return (out, 0);
    }
    let fu = u - uf;
    let fv = v - vf;
    let u0 = uf.to_i64().unwrap();
    let v0 = vf.to_i64().unwrap();
    let one = T::one();
    let corners = [
        (v0, u0, (one - fu) * (one - fv), -(one - fv), -(one - fu)),
        (v0, u0 + 1, fu * (one - fv), one - fv, -fu),
        (v0 + 1, u0, (one - fu) * fv, -fv, one - fu),
        (v0 + 1, u0 + 1, fu * fv, fv, fu),
    ];
    for (r, c, w, du, dv) in corners {
        if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
            out[n] = ((r as usize) * cols + c as usize, w, du, dv);
            n += 1;
        }
    }
    (out, n)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "not a scalar node");
        val[0]
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Const, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        self.push(shape, data, Op::Const, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        self.same_shape(a, b, what);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(self.shape(a).to_vec(), value, op, tracked)
    }

    fn map_op(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.map_op(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map_op(a, |x| x + c, Op::AddScalar(a))
    }

    /// Element-wise product with a constant array of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Var {
        assert_eq!(c.len(), self.value(a).len(), "mul_const: length mismatch");
        let value = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), value, Op::MulConst(a, c), tracked)
    }

    fn row_len(&self, x: Var, b: Var, what: &str) -> usize {
        let k = self.value(b).len();
        let sx = self.shape(x);
        assert_eq!(*sx.last().unwrap(), k, "{what}: last axis {:?} vs {k}", sx);
        k
    }

    /// `x + b` with `b` broadcast along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let k = self.row_len(x, b, "add_row");
        let bv = self.value(b);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % k])
            .collect();
        let tracked = self.tracked(x) || self.tracked(b);
        self.push(self.shape(x).to_vec(), value, Op::AddRow(x, b), tracked)
    }

    /// `x * g` with `g` broadcast along the last axis of `x`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let k = self.row_len(x, g, "mul_row");
        let gv = self.value(g);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % k])
            .collect();
        let tracked = self.tracked(x) || self.tracked(g);
        self.push(self.shape(x).to_vec(), value, Op::MulRow(x, g), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let tracked = self.tracked(a);
        self.push(vec![1], vec![s], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: T = self.value(a).iter().copied().sum();
        let tracked = self.tracked(a);
        self.push(vec![1], vec![s / T::of_usize(n.max(1))], Op::Mean(a), tracked)
    }

    /// Sums a `[n, m]` matrix over its rows, giving `[m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "sum_rows expects a matrix");
        let m = s[1];
        let mut out = vec![T::zero(); m];
        for row in self.value(a).chunks(m) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let tracked = self.tracked(a);
        self.push(vec![m], out, Op::SumRows(a), tracked)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} x {sb:?}");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += x * y;
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(vec![n, m], out, Op::MatMul(a, b, [n, k, m]), tracked)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let k = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), tracked)
    }

    /// Zero-mean, unit-variance normalisation along the last axis.
    pub fn row_norm(&mut self, a: Var, eps: T) -> Var {
        let k = *self.shape(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        let kf = T::of_usize(k);
        let mut inv = Vec::with_capacity(out.len() / k);
        for row in out.chunks_mut(k) {
            let mean = row.iter().copied().sum::<T>() / kf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / kf;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv.push(is);
        }
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::RowNorm(a, inv), tracked)
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, k, k]`, bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 3 && sw.len() == 4 && sw[1] == sx[0] && sw[2] == sw[3], "conv2d shapes {sx:?} {sw:?}");
        assert_eq!(self.shape(b), &[sw[0]], "conv2d bias shape");
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![T::zero(); o * ho * wo];
        for oc in 0..o {
            let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bv[oc]);
            for ic in 0..c {
                let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((oc * c + ic) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && (ix as usize) < wd {
                                    *ov += wt * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(vec![o, ho, wo], out, Op::Conv2d { x, w, b, stride, pad }, tracked)
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "upsample_nearest expects [C, H, W]");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out.push(xv[(ch * h + oy / factor) * w + ox / factor]);
                }
            }
        }
        let tracked = self.tracked(x);
        self.push(vec![c, ho, wo], out, Op::UpsampleNearest(x, factor), tracked)
    }

    /// Trilinear upsampling of `[h, w, z, d]` to `[H, W, Z, d]` with
    /// half-cell-centred sampling and edge clamping.
    pub fn upsample_trilinear(&mut self, x: Var, out_dims: [usize; 3]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample_trilinear expects [h, w, z, d]");
        let taps = [
            linear_taps::<T>(s[0], out_dims[0]),
            linear_taps::<T>(s[1], out_dims[1]),
            linear_taps::<T>(s[2], out_dims[2]),
        ];
        let d = s[3];
        let xv = self.value(x);
        let mut out = vec![T::zero(); out_dims.iter().product::<usize>() * d];
        let mut o = 0;
        for &(a0, a1, wa0, wa1) in &taps[0] {
            for &(b0, b1, wb0, wb1) in &taps[1] {
                for &(c0, c1, wc0, wc1) in &taps[2] {
                    let dst = &mut out[o * d..(o + 1) * d];
                    for (ia, wa) in [(a0, wa0), (a1, wa1)] {
                        for (ib, wb) in [(b0, wb0), (b1, wb1)] {
                            for (ic, wc) in [(c0, wc0), (c1, wc1)] {
                                let wt = wa * wb * wc;
                                if wt == T::zero() {
                                    continue;
                                }
                                let src = ((ia * s[1] + ib) * s[2] + ic) * d;
                                for (dv, &sv) in dst.iter_mut().zip(&xv[src..src + d]) {
                                    *dv += wt * sv;
                                }
                            }
                        }
                    }
                    o += 1;
                }
            }
        }
        let tracked = self.tracked(x);
        let shape = vec![out_dims[0], out_dims[1], out_dims[2], d];
        self.push(shape, out, Op::UpsampleTrilinear(x, taps), tracked)
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[1..], sb[1..], "concat0: trailing shapes differ");
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(shape, value, Op::Concat0(a, b), tracked)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(perm.len(), s.len(), "permute rank mismatch");
        let map = permute_map(&s, perm);
        let xv = self.value(x);
        let value = map.iter().map(|&i| xv[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        let tracked = self.tracked(x);
        self.push(shape, value, Op::Permute(x, perm.to_vec()), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(numel(&shape), self.value(x).len(), "reshape size mismatch");
        let value = self.value(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, value, Op::Reshape(x), tracked)
    }

    /// Selects rows of a `[n, d]` matrix. An empty index list yields `[0, d]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "gather_rows expects a matrix");
        let (n, d) = (s[0], s[1]);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            assert!(i < n, "gather_rows index {i} out of {n}");
            value.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let tracked = self.tracked(x);
        self.push(vec![idx.len(), d], value, Op::GatherRows(x, idx), tracked)
    }

    /// Copy of `base` whose rows at `idx` are replaced by the rows of `rows`.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, idx: Vec<usize>) -> Var {
        let sb = self.shape(base).to_vec();
        let sr = self.shape(rows);
        assert!(sb.len() == 2 && sr.len() == 2 && sb[1] == sr[1] && sr[0] == idx.len(), "scatter_rows shapes");
        let d = sb[1];
        let mut value = self.value(base).to_vec();
        let rv = self.value(rows);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < sb[0], "scatter_rows index {i} out of {}", sb[0]);
            value[i * d..(i + 1) * d].copy_from_slice(&rv[r * d..(r + 1) * d]);
        }
        let tracked = self.tracked(base) || self.tracked(rows);
        self.push(sb, value, Op::ScatterRows(base, rows, idx), tracked)
    }

    /// Bilinear sampling of `map: [rows, cols, d]` at `points: [P, 2]`.
    ///
    /// A point is `(u, v)`: `u` runs along columns and `v` along rows, with
    /// grid node `(row i, col j)` located at `(u, v) = (j, i)`. Corners that
    /// fall outside the map read as zero.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Var {
        let sm = self.shape(map).to_vec();
        let sp = self.shape(points);
        assert!(sm.len() == 3 && sp.len() == 2 && sp[1] == 2, "bilinear_sample shapes {sm:?} {sp:?}");
        let (rows, cols, d) = (sm[0], sm[1], sm[2]);
        let p = sp[0];
        let (mv, pv) = (self.value(map), self.value(points));
        let mut out = vec![T::zero(); p * d];
        for i in 0..p {
            let (corners, n) = bilinear_corners(pv[2 * i], pv[2 * i + 1], rows, cols);
            let dst = &mut out[i * d..(i + 1) * d];
            for &(off, w, _, _) in &corners[..n] {
                for (o, &f) in dst.iter_mut().zip(&mv[off * d..(off + 1) * d]) {
                    *o += w * f;
                }
            }
        }
        let tracked = self.tracked(map) || self.tracked(points);
        self.push(vec![p, d], out, Op::Bilinear(map, points), tracked)
    }

    /// `out[i] = sum_s weights[i, s] * samples[i * k + s]` for `samples: [n*k, d]`, `weights: [n, k]`.
    pub fn group_weighted_sum(&mut self, samples: Var, weights: Var) -> Var {
        let ss = self.shape(samples);
        let sw = self.shape(weights);
        assert!(ss.len() == 2 && sw.len() == 2 && ss[0] == sw[0] * sw[1], "group_weighted_sum shapes {ss:?} {sw:?}");
        let (n, k, d) = (sw[0], sw[1], ss[1]);
        let (sv, wv) = (self.value(samples), self.value(weights));
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let dst = &mut out[i * d..(i + 1) * d];
            for s in 0..k {
                let w = wv[i * k + s];
                let src = &sv[(i * k + s) * d..(i * k + s + 1) * d];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        let tracked = self.tracked(samples) || self.tracked(weights);
        self.push(vec![n, d], out, Op::GroupWeightedSum(samples, weights), tracked)
    }

    /// Scales each row of a `[n, d]` matrix by a constant coefficient.
    pub fn scale_rows(&mut self, x: Var, coeff: Vec<T>) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 2 && s[0] == coeff.len(), "scale_rows shapes");
        let d = s[1];
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * coeff[i / d])
            .collect();
        let tracked = self.tracked(x);
        self.push(s, value, Op::ScaleRows(x, coeff), tracked)
    }

    /// Mean binary cross-entropy between logits and `{0, 1}` targets.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Vec<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "bce: length mismatch");
        let n = lv.len();
        let total: T = lv
            .iter()
            .zip(&targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let tracked = self.tracked(logits);
        self.push(vec![1], vec![total / T::of_usize(n.max(1))], Op::BceLogitsMean(logits, targets), tracked)
    }

    /// Class-weighted softmax cross-entropy over rows of `[K, C]` logits,
    /// normalised by the number of labelled rows (`None` rows are ignored).
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: Vec<Option<usize>>, weights: Vec<T>) -> Var {
        let s = self.shape(logits);
        assert!(s.len() == 2 && s[0] == labels.len() && s[1] == weights.len(), "weighted_cross_entropy shapes");
        let c = s[1];
        let lv = self.value(logits);
        let mut total = T::zero();
        let mut count = 0;
        for (row, label) in lv.chunks(c).zip(&labels) {
            if let Some(y) = *label {
                assert!(y < c, "label {y} out of {c} classes");
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
                total += weights[y] * (lse - row[y]);
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::of_usize(count) };
        let tracked = self.tracked(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::WeightedCe {
                logits,
                labels,
                weights,
                count,
            },
            tracked,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].tracked {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let len = |v: Var| self.nodes[v.0].value.len();
        let want = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if want(*a) {
                    add_into(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * bv[k];
                        }
                    });
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g.len(), |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] * av[k];
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let out = &node.value;
                if want(*a) {
                    add_into(&mut grads[a.0], g.len(), |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] / bv[k];
                        }
                    });
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g.len(), |d| {
                        for k in 0..d.len() {
                            d[k] -= g[k] * out[k] / bv[k];
                        }
                    });
                }
            }
            Op::MulScalar(a, c) => {
                add_into(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                add_into(&mut grads[a.0], g.len(), |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::MulConst(a, c) => {
                add_into(&mut grads[a.0], g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * c[k];
                    }
                });
            }
            Op::AddRow(x, b) | Op::MulRow(x, b) => {
                let k = len(*b);
                let is_mul = matches!(node.op, Op::MulRow(..));
                let (xv, bv) = (self.value(*x), self.value(*b));
                if want(*x) {
                    add_into(&mut grads[x.0], g.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += if is_mul { g[j] * bv[j % k] } else { g[j] };
                        }
                    });
                }
                if want(*b) {
                    add_into(&mut grads[b.0], k, |d| {
                        for j in 0..g.len() {
                            d[j % k] += if is_mul { g[j] * xv[j] } else { g[j] };
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                add_into(&mut grads[a.0], g.len(), |d| {
                    for k in 0..d.len() {
                        if av[k] > T::zero() {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                add_into(&mut grads[a.0], g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * out[k] * (T::one() - out[k]);
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a);
                add_into(&mut grads[a.0], g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / av[k];
                    }
                });
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = len(*a);
                let scale = if matches!(node.op, Op::Mean(_)) { g[0] / T::of_usize(n.max(1)) } else { g[0] };
                add_into(&mut grads[a.0], n, |d| d.iter_mut().for_each(|x| *x += scale));
            }
            Op::SumRows(a) => {
                let m = g.len();
                add_into(&mut grads[a.0], len(*a), |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        *x += g[j % m];
                    }
                });
            }
            Op::MatMul(a, b, [n, k, m]) => {
                let (n, k, m) = (*n, *k, *m);
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    add_into(&mut grads[a.0], n * k, |d| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &bv[p * m..(p + 1) * m];
                                d[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                            }
                        }
                    });
                }
                if want(*b) {
                    add_into(&mut grads[b.0], k * m, |d| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == T::zero() {
                                    continue;
                                }
                                for (dv, &gv) in d[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *dv += x * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let k = *node.shape.last().unwrap();
                let y = &node.value;
                add_into(&mut grads[a.0], g.len(), |d| {
                    for r in 0..g.len() / k {
                        let (gr, yr) = (&g[r * k..(r + 1) * k], &y[r * k..(r + 1) * k]);
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            d[r * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::RowNorm(a, inv) => {
                let k = *node.shape.last().unwrap();
                let kf = T::of_usize(k);
                let y = &node.value;
                add_into(&mut grads[a.0], g.len(), |d| {
                    for (r, &is) in inv.iter().enumerate() {
                        let (gr, yr) = (&g[r * k..(r + 1) * k], &y[r * k..(r + 1) * k]);
                        let gm = gr.iter().copied().sum::<T>() / kf;
                        let gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / kf;
                        for j in 0..k {
                            d[r * k + j] += is * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(*x, *w, *b, *stride, *pad, &node.shape, g, grads),
            Op::UpsampleNearest(x, f) => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h * f, w * f);
                add_into(&mut grads[x.0], c * h * w, |d| {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                d[(ch * h + oy / f) * w + ox / f] += g[(ch * ho + oy) * wo + ox];
                            }
                        }
                    }
                });
            }
            Op::UpsampleTrilinear(x, taps) => {
                let s = self.shape(*x).to_vec();
                let dch = s[3];
                add_into(&mut grads[x.0], len(*x), |dx| {
                    let mut o = 0;
                    for &(a0, a1, wa0, wa1) in &taps[0] {
                        for &(b0, b1, wb0, wb1) in &taps[1] {
                            for &(c0, c1, wc0, wc1) in &taps[2] {
                                let src = &g[o * dch..(o + 1) * dch];
                                for (ia, wa) in [(a0, wa0), (a1, wa1)] {
                                    for (ib, wb) in [(b0, wb0), (b1, wb1)] {
                                        for (ic, wc) in [(c0, wc0), (c1, wc1)] {
                                            let wt = wa * wb * wc;
                                            if wt == T::zero() {
                                                continue;
                                            }
                                            let dst = ((ia * s[1] + ib) * s[2] + ic) * dch;
                                            for (dv, &gv) in dx[dst..dst + dch].iter_mut().zip(src) {
                                                *dv += wt * gv;
                                            }
                                        }
                                    }
                                }
                                o += 1;
                            }
                        }
                    }
                });
            }
            Op::Concat0(a, b) => {
                let na = len(*a);
                if want(*a) {
                    add_into(&mut grads[a.0], na, |d| d.iter_mut().zip(&g[..na]).for_each(|(x, &y)| *x += y));
                }
                if want(*b) {
                    add_into(&mut grads[b.0], g.len() - na, |d| d.iter_mut().zip(&g[na..]).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Permute(x, perm) => {
                let map = permute_map(self.shape(*x), perm);
                add_into(&mut grads[x.0], g.len(), |d| {
                    for (o, &src) in map.iter().enumerate() {
                        d[src] += g[o];
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let d = node.shape[1];
                add_into(&mut grads[x.0], len(*x), |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dx[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::ScatterRows(base, rows, idx) => {
                let d = node.shape[1];
                if want(*base) {
                    add_into(&mut grads[base.0], g.len(), |dx| {
                        dx.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                        for &i in idx {
                            for j in 0..d {
                                dx[i * d + j] -= g[i * d + j];
                            }
                        }
                    });
                }
                if want(*rows) {
                    add_into(&mut grads[rows.0], len(*rows), |dx| {
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..d {
                                dx[r * d + j] += g[i * d + j];
                            }
                        }
                    });
                }
            }
            Op::Bilinear(map, points) => {
                let sm = self.shape(*map);
                let (rows, cols, d) = (sm[0], sm[1], sm[2]);
                let (mv, pv) = (self.value(*map), self.value(*points));
                let p = len(*points) / 2;
                if want(*map) {
                    add_into(&mut grads[map.0], mv.len(), |dm| {
                        for i in 0..p {
                            let (corners, n) = bilinear_corners(pv[2 * i], pv[2 * i + 1], rows, cols);
                            let gi = &g[i * d..(i + 1) * d];
                            for &(off, w, _, _) in &corners[..n] {
                                for (x, &y) in dm[off * d..(off + 1) * d].iter_mut().zip(gi) {
                                    *x += w * y;
                                }
                            }
                        }
                    });
                }
                if want(*points) {
                    add_into(&mut grads[points.0], 2 * p, |dp| {
                        for i in 0..p {
                            let (corners, n) = bilinear_corners(pv[2 * i], pv[2 * i + 1], rows, cols);
                            let gi = &g[i * d..(i + 1) * d];
                            for &(off, _, du, dv) in &corners[..n] {
                                let dot: T = gi.iter().zip(&mv[off * d..(off + 1) * d]).map(|(&a, &b)| a * b).sum();
                                dp[2 * i] += du * dot;
                                dp[2 * i + 1] += dv * dot;
                            }
                        }
                    });
                }
            }
            Op::GroupWeightedSum(samples, weights) => {
                let sw = self.shape(*weights);
                let (n, k) = (sw[0], sw[1]);
                let d = node.shape[1];
                let (sv, wv) = (self.value(*samples), self.value(*weights));
                if want(*samples) {
                    add_into(&mut grads[samples.0], sv.len(), |ds| {
                        for i in 0..n {
                            let gi = &g[i * d..(i + 1) * d];
                            for s in 0..k {
                                let w = wv[i * k + s];
                                for (x, &y) in ds[(i * k + s) * d..(i * k + s + 1) * d].iter_mut().zip(gi) {
                                    *x += w * y;
                                }
                            }
                        }
                    });
                }
                if want(*weights) {
                    add_into(&mut grads[weights.0], n * k, |dw| {
                        for i in 0..n {
                            let gi = &g[i * d..(i + 1) * d];
                            for s in 0..k {
                                let src = &sv[(i * k + s) * d..(i * k + s + 1) * d];
                                dw[i * k + s] += gi.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                            }
                        }
                    });
                }
            }
            Op::ScaleRows(x, coeff) => {
                let d = node.shape[1];
                add_into(&mut grads[x.0], g.len(), |dx| {
                    for (j, v) in dx.iter_mut().enumerate() {
                        *v += g[j] * coeff[j / d];
                    }
                });
            }
            Op::BceLogitsMean(logits, targets) => {
                let lv = self.value(*logits);
                let scale = g[0] / T::of_usize(lv.len().max(1));
                add_into(&mut grads[logits.0], lv.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += scale * (sigmoid(lv[k]) - targets[k]);
                    }
                });
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let c = weights.len();
                let lv = self.value(*logits);
                let scale = g[0] / T::of_usize(*count);
                add_into(&mut grads[logits.0], lv.len(), |d| {
                    let mut p = vec![T::zero(); c];
                    for (r, label) in labels.iter().enumerate() {
                        let Some(y) = *label else { continue };
                        p.copy_from_slice(&lv[r * c..(r + 1) * c]);
                        softmax_in_place(&mut p);
                        let s = scale * weights[y];
                        for j in 0..c {
                            let ind = if j == y { T::one() } else { T::zero() };
                            d[r * c + j] += s * (p[j] - ind);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        let (ho, wo) = (out_shape[1], out_shape[2]);
        let (xv, wv) = (self.value(x), self.value(w));
        if self.tracked(b) {
            add_into(&mut grads[b.0], o, |db| {
                for oc in 0..o {
                    db[oc] += g[oc * ho * wo..(oc + 1) * ho * wo].iter().copied().sum::<T>();
                }
            });
        }
        let want_x = self.tracked(x);
        let want_w = self.tracked(w);
        if !want_x && !want_w {
            return;
        }
        let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
        for oc in 0..o {
            let gplane = &g[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * c + ic) * k + ky) * k + kx;
                        let wt = wv[widx];
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = ic * h * wd + iy as usize * wd;
                            for ox in 0..wo {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                let gv = gplane[oy * wo + ox];
                                if want_w {
                                    acc += gv * xv[base + ix as usize];
                                }
                                if want_x {
                                    dx[base + ix as usize] += gv * wt;
                                }
                            }
                        }
                        if want_w {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        if want_x {
            add_into(&mut grads[x.0], dx.len(), |d| d.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b));
        }
        if want_w {
            add_into(&mut grads[w.0], dw.len(), |d| d.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b));
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
