//! Deformable attention and the transformer layers built around it.

use crate::numerics::{Bound, ParamSet, Rng, Tape, Var};
use crate::scalar::Real;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameter names and sizes of one deformable attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    pub prefix: String,
    pub d: usize,
    pub n_samples: usize,
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub offset_w: Var,
    pub offset_b: Var,
    pub attn_w: Var,
    pub attn_b: Var,
    pub value_w: Var,
    pub out_w: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ffn1_w: Var,
    pub ffn1_b: Var,
    pub ffn2_w: Var,
    pub ffn2_b: Var,
    pub n_samples: usize,
}

impl AttentionLayerParams {
    pub fn new(prefix: impl Into<String>, d: usize, n_samples: usize) -> Self {
        AttentionLayerParams {
            prefix: prefix.into(),
            d,
            n_samples,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Offset and attention-logit heads start at zero, so every sample sits
    /// on the reference point with uniform weight.
    pub fn init_params<T: Real>(&self, rng: &mut Rng, params: &mut ParamSet<T>) {
        let (d, ns) = (self.d, self.n_samples);
        let inv = (1.0 / d as f64).sqrt();
        params.insert_full(&self.name("ln1.g"), vec![d], 1.0);
        params.insert_zeros(&self.name("ln1.b"), vec![d]);
        params.insert_zeros(&self.name("offset.w"), vec![d, 2 * ns]);
        params.insert_zeros(&self.name("offset.b"), vec![2 * ns]);
        params.insert_zeros(&self.name("attn.w"), vec![d, ns]);
        params.insert_zeros(&self.name("attn.b"), vec![ns]);
        params.insert_normal(&self.name("value.w"), vec![d, d], inv, rng);
        params.insert_normal(&self.name("out.w"), vec![d, d], inv, rng);
        params.insert_full(&self.name("ln2.g"), vec![d], 1.0);
        params.insert_zeros(&self.name("ln2.b"), vec![d]);
        params.insert_normal(&self.name("ffn1.w"), vec![d, 2 * d], (2.0 / d as f64).sqrt(), rng);
        params.insert_zeros(&self.name("ffn1.b"), vec![2 * d]);
        params.insert_normal(&self.name("ffn2.w"), vec![2 * d, d], 0.5 * (1.0 / (2 * d) as f64).sqrt(), rng);
        params.insert_zeros(&self.name("ffn2.b"), vec![d]);
    }

    /// Identity value and output projections (used by degenerate-case checks).
    pub fn set_identity_projections<T: Real>(&self, params: &mut ParamSet<T>) {
        for leaf in ["value.w", "out.w"] {
            let t = params.get_mut(&self.name(leaf)).expect("layer initialised");
            let d = self.d;
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = if i / d == i % d { T::one() } else { T::zero() };
            }
        }
    }

    pub fn bind(&self, bound: &Bound) -> LayerVars {
        let g = |leaf: &str| bound.get(&self.name(leaf));
        LayerVars {
            ln1_g: g("ln1.g"),
            ln1_b: g("ln1.b"),
            offset_w: g("offset.w"),
            offset_b: g("offset.b"),
            attn_w: g("attn.w"),
            attn_b: g("attn.b"),
            value_w: g("value.w"),
            out_w: g("out.w"),
            ln2_g: g("ln2.g"),
            ln2_b: g("ln2.b"),
            ffn1_w: g("ffn1.w"),
            ffn1_b: g("ffn1.b"),
            ffn2_w: g("ffn2.w"),
            ffn2_b: g("ffn2.b"),
            n_samples: self.n_samples,
        }
    }
}

/// Predicted sampling pattern for a batch of queries.
#[derive(Clone, Copy, Debug)]
pub struct SamplingPlan {
    /// `[n, 2 N_s]` pixel offsets, `(du, dv)` per sample.
    pub offsets: Var,
    /// `[n, N_s]` softmax-normalised attention weights.
    pub weights: Var,
}

/// Offsets and weights predicted from `queries: [n, d]`.
pub fn sampling_plan<T: Real>(tape: &mut Tape<T>, lv: &LayerVars, queries: Var) -> SamplingPlan {
    let off = tape.matmul(queries, lv.offset_w);
    let offsets = tape.add_row(off, lv.offset_b);
    let logits = tape.matmul(queries, lv.attn_w);
    let logits = tape.add_row(logits, lv.attn_b);
    let weights = tape.softmax_rows(logits);
    SamplingPlan { offsets, weights }
}

/// `sum_s A_s F(p + dp_s)` for every query, before the value projection.
/// `refs` holds one reference point `(u, v)` per query in `fmap` cells.
pub fn sample_features<T: Real>(tape: &mut Tape<T>, plan: &SamplingPlan, refs: &[[T; 2]], fmap: Var) -> Var {
    let n = refs.len();
    let ns = tape.shape(plan.weights)[1];
    let mut base = Vec::with_capacity(n * ns * 2);
    for r in refs {
        for _ in 0..ns {
            base.extend_from_slice(r);
        }
    }
    let base = tape.constant_raw(vec![n * ns, 2], base);
    let off = tape.reshape(plan.offsets, vec![n * ns, 2]);
    let points = tape.add(base, off);
    let samples = tape.bilinear_sample(fmap, points);
    tape.group_weighted_sum(samples, plan.weights)
}

/// Deformable attention of `queries: [n, d]` into `fmap: [rows, cols, d]`:
/// `sum_s A_s W F(p + dp_s)` with offsets and weights predicted from the
/// query and `W` the layer's value projection.
pub fn deformable_attention<T: Real>(
    tape: &mut Tape<T>,
    lv: &LayerVars,
    queries: Var,
    refs: &[[T; 2]],
    fmap: Var,
) -> (Var, SamplingPlan) {
    let plan = sampling_plan(tape, lv, queries);
    let pooled = sample_features(tape, &plan, refs, fmap);
    (tape.matmul(pooled, lv.value_w), plan)
}

pub(crate) fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, g: Var, b: Var) -> Var {
    let n = tape.row_norm(x, T::of(LAYER_NORM_EPS));
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

/// `x + W2 relu(W1 LN(x) + b1) + b2`.
pub(crate) fn feed_forward<T: Real>(tape: &mut Tape<T>, lv: &LayerVars, x: Var) -> Var {
    let h = layer_norm(tape, x, lv.ln2_g, lv.ln2_b);
    let h = tape.matmul(h, lv.ffn1_w);
    let h = tape.add_row(h, lv.ffn1_b);
    let h = tape.relu(h);
    let h = tape.matmul(h, lv.ffn2_w);
    let h = tape.add_row(h, lv.ffn2_b);
    tape.add(x, h)
}
