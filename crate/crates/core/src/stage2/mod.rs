//! Sparse-to-dense completion: proposed queries attend into image features,
//! mask tokens fill the remaining cells, the dense grid attends to itself and
//! a linear head emits per-voxel class logits.

mod attention;

pub use attention::{
    deformable_attention, sample_features, sampling_plan, AttentionLayerParams, LayerVars, SamplingPlan,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SscError};
use crate::features::FeatureMap;
use crate::geometry::{project, voxel_center, CameraIntrinsics, CameraPose, Resolution, VolumeSpec};
use crate::numerics::{Bound, ParamSet, Rng, Tape, Var};
use crate::scalar::Real;
use crate::stage1::QueryProposal;

use attention::{feed_forward, layer_norm};

/// Architecture of the completion transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub d: usize,
    pub n_samples: usize,
    pub cross_layers: usize,
    pub self_layers: usize,
    pub cross_attention: bool,
    pub self_attention: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            d: 32,
            n_samples: 8,
            cross_layers: 3,
            self_layers: 2,
            cross_attention: true,
            self_attention: true,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_samples == 0 {
            return Err(SscError::invalid("stage-2 width and sample count must be positive"));
        }
        Ok(())
    }
}

/// Learnable query grid `Q`, positional embeddings and the mask token,
/// stored as `[N_q, d]` rows in row-major cell order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelQuerySet {
    pub dims: [usize; 3],
    pub d: usize,
}

/// Tape handles of the query set.
#[derive(Clone, Copy, Debug)]
pub struct QuerySetVars {
    pub grid_dims: [usize; 3],
    pub queries: Var,
    pub pos: Var,
    pub mask_token: Var,
    /// `Q + pos`, `[N_q, d]`.
    pub embedded: Var,
}

impl VoxelQuerySet {
    pub const QUERIES: &'static str = "q.queries";
    pub const POS: &'static str = "q.pos";
    pub const MASK: &'static str = "q.mask_token";

    pub fn new(dims: [usize; 3], d: usize) -> Self {
        VoxelQuerySet { dims, d }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn init_params<T: Real>(&self, rng: &mut Rng, params: &mut ParamSet<T>) {
        let n = self.len();
        params.insert_normal(Self::QUERIES, vec![n, self.d], 1.0, rng);
        params.insert_normal(Self::POS, vec![n, self.d], 1.0, rng);
        params.insert_normal(Self::MASK, vec![self.d], 1.0, rng);
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound) -> QuerySetVars {
        let queries = bound.get(Self::QUERIES);
        let pos = bound.get(Self::POS);
        let embedded = tape.add(queries, pos);
        QuerySetVars {
            grid_dims: self.dims,
            queries,
            pos,
            mask_token: bound.get(Self::MASK),
            embedded,
        }
    }
}

/// Feature map of one camera frame together with its calibration.
#[derive(Clone, Debug)]
pub struct CameraView<T> {
    pub fmap: FeatureMap,
    pub intrinsics: CameraIntrinsics<T>,
    pub pose: CameraPose<T>,
    pub time_index: usize,
}

impl<T: Real> CameraView<T> {
    fn order_key(&self) -> (usize, Vec<u64>) {
        let mut bits = Vec::with_capacity(16);
        for row in &self.pose.rotation {
            bits.extend(row.iter().map(|x| x.as_f64().to_bits()));
        }
        bits.extend(self.pose.translation.iter().map(|x| x.as_f64().to_bits()));
        let k = &self.intrinsics;
        bits.extend([k.fu, k.fv, k.cu, k.cv].iter().map(|x| x.as_f64().to_bits()));
        (self.time_index, bits)
    }
}

/// Per-view reference points of the proposed cells and the `1 / |V|` weight
/// each view contributes (0 for a miss).
struct ViewRefs<T> {
    refs: Vec<[T; 2]>,
    coeff: Vec<T>,
}

/// Views are visited in a canonical order so the hit-set average does not
/// depend on the order the caller lists them.
fn view_references<T: Real>(
    views: &[CameraView<T>],
    proposal: &QueryProposal,
    spec: &VolumeSpec<T>,
) -> Result<(Vec<usize>, Vec<ViewRefs<T>>)> {
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by_cached_key(|&i| views[i].order_key());
    let n = proposal.len();
    let mut per_view: Vec<ViewRefs<T>> = Vec::with_capacity(views.len());
    let mut hits = vec![0usize; n];
    for &vi in &order {
        let view = &views[vi];
        let mut refs = Vec::with_capacity(n);
        let mut coeff = Vec::with_capacity(n);
        for (r, &cell) in proposal.indices.iter().enumerate() {
            let c = voxel_center(cell, spec, Resolution::Query)?;
            let (px, ok) = project(c, &view.intrinsics, &view.pose);
            if ok {
                hits[r] += 1;
                refs.push(view.fmap.from_image_coords(px));
                coeff.push(T::one());
            } else {
                refs.push([T::zero(); 2]);
                coeff.push(T::zero());
            }
        }
        per_view.push(ViewRefs { refs, coeff });
    }
    for v in &mut per_view {
        for (c, &h) in v.coeff.iter_mut().zip(&hits) {
            if h > 0 {
                *c /= T::of_usize(h);
            }
        }
    }
    Ok((order, per_view))
}

/// Output of one attention layer stack, with the softmax weights of every
/// layer kept for inspection.
#[derive(Clone, Debug)]
pub struct AttendOutput {
    pub features: Var,
    pub weights: Vec<Var>,
}

/// Deformable cross-attention of the proposed queries `q_p: [N_p, d]` into
/// the camera views, one pass per layer.
pub fn cross_attend<T: Real>(
    tape: &mut Tape<T>,
    q_p: Var,
    proposal: &QueryProposal,
    views: &[CameraView<T>],
    spec: &VolumeSpec<T>,
    layers: &[LayerVars],
) -> Result<AttendOutput> {
    if views.is_empty() {
        return Err(SscError::invalid("cross-attention needs at least one camera view"));
    }
    let shape = tape.shape(q_p).to_vec();
    if shape.len() != 2 || shape[0] != proposal.len() {
        return Err(SscError::Shape {
            name: "proposed queries".into(),
            expected: vec![proposal.len(), shape.get(1).copied().unwrap_or(0)],
            found: shape,
        });
    }
    let (order, refs) = view_references(views, proposal, spec)?;
    let mut x = q_p;
    let mut weights = Vec::with_capacity(layers.len());
    for lv in layers {
        let h = layer_norm(tape, x, lv.ln1_g, lv.ln1_b);
        let plan = sampling_plan(tape, lv, h);
        weights.push(plan.weights);
        let mut acc: Option<Var> = None;
        for (&vi, vr) in order.iter().zip(&refs) {
            let pooled = sample_features(tape, &plan, &vr.refs, views[vi].fmap.var);
            let pooled = tape.scale_rows(pooled, vr.coeff.clone());
            acc = Some(match acc {
                Some(a) => tape.add(a, pooled),
                None => pooled,
            });
        }
        let pooled = acc.expect("at least one view");
        let attn = tape.matmul(pooled, lv.value_w);
        let attn = tape.matmul(attn, lv.out_w);
        x = tape.add(x, attn);
        x = feed_forward(tape, lv, x);
    }
    Ok(AttendOutput { features: x, weights })
}

/// Dense `[N_q, d]` grid: refined rows at proposed cells, `m + pos` elsewhere.
pub fn scatter_with_mask_tokens<T: Real>(
    tape: &mut Tape<T>,
    q_hat: Var,
    proposal: &QueryProposal,
    qset: &QuerySetVars,
) -> Result<Var> {
    let nq: usize = qset.grid_dims.iter().product();
    let shape = tape.shape(q_hat).to_vec();
    let d = tape.shape(qset.pos)[1];
    if proposal.mask.dims() != qset.grid_dims {
        return Err(SscError::Shape {
            name: "proposal mask".into(),
            expected: qset.grid_dims.to_vec(),
            found: proposal.mask.dims().to_vec(),
        });
    }
    if shape != [proposal.len(), d] {
        return Err(SscError::Shape {
            name: "refined queries".into(),
            expected: vec![proposal.len(), d],
            found: shape,
        });
    }
    if proposal.flat.iter().any(|&f| f >= nq) {
        return Err(SscError::invalid("proposal index outside the query grid"));
    }
    let base = tape.add_row(qset.pos, qset.mask_token);
    Ok(tape.scatter_rows(base, q_hat, proposal.flat.clone()))
}

/// Reference point `(u, v) = (j, i z + k)` of each cell on the `(h z) x w`
/// self-attention map.
pub fn self_attention_refs<T: Real>(dims: [usize; 3]) -> Vec<[T; 2]> {
    let [h, w, z] = dims;
    let mut refs = Vec::with_capacity(h * w * z);
    for i in 0..h {
        for j in 0..w {
            for k in 0..z {
                refs.push([T::of_usize(j), T::of_usize(i * z + k)]);
            }
        }
    }
    refs
}

/// Deformable self-attention over the dense grid `f3d: [N_q, d]`.
pub fn self_attend<T: Real>(tape: &mut Tape<T>, f3d: Var, dims: [usize; 3], layers: &[LayerVars]) -> Result<AttendOutput> {
    let [h, w, z] = dims;
    let shape = tape.shape(f3d).to_vec();
    if shape.len() != 2 || shape[0] != h * w * z {
        return Err(SscError::Shape {
            name: "dense voxel features".into(),
            expected: vec![h * w * z, shape.get(1).copied().unwrap_or(0)],
            found: shape,
        });
    }
    let d = shape[1];
    let refs = self_attention_refs::<T>(dims);
    let mut x = f3d;
    let mut weights = Vec::with_capacity(layers.len());
    for lv in layers {
        let hn = layer_norm(tape, x, lv.ln1_g, lv.ln1_b);
        let plan = sampling_plan(tape, lv, hn);
        weights.push(plan.weights);
        let grid = tape.reshape(x, vec![h, w, z, d]);
        let grid = tape.permute(grid, &[0, 2, 1, 3]);
        let map = tape.reshape(grid, vec![h * z, w, d]);
        let pooled = sample_features(tape, &plan, &refs, map);
        let attn = tape.matmul(pooled, lv.value_w);
        let attn = tape.matmul(attn, lv.out_w);
        x = tape.add(x, attn);
        x = feed_forward(tape, lv, x);
    }
    Ok(AttendOutput { features: x, weights })
}

/// Output head parameter names.
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Trilinear upsampling of `[N_q, d]` query features to the output grid,
/// then a per-voxel linear map to class logits: `[H W Z, classes]`.
pub fn output_head<T: Real>(
    tape: &mut Tape<T>,
    f3d: Var,
    spec: &VolumeSpec<T>,
    head_w: Var,
    head_b: Var,
) -> Result<Var> {
    let q = spec.dims_at(Resolution::Query);
    let o = spec.dims_at(Resolution::Output);
    let shape = tape.shape(f3d).to_vec();
    let nq: usize = q.iter().product();
    if shape.len() != 2 || shape[0] != nq {
        return Err(SscError::Shape {
            name: "refined voxel features".into(),
            expected: vec![nq, shape.get(1).copied().unwrap_or(0)],
            found: shape,
        });
    }
    let d = shape[1];
    let x = if q == o {
        f3d
    } else {
        let grid = tape.reshape(f3d, vec![q[0], q[1], q[2], d]);
        let up = tape.upsample_trilinear(grid, o);
        tape.reshape(up, vec![o.iter().product(), d])
    };
    let logits = tape.matmul(x, head_w);
    Ok(tape.add_row(logits, head_b))
}

/// Stage-2 output: logits over the output grid plus intermediate handles.
#[derive(Clone, Debug)]
pub struct Stage2Output {
    /// `[H W Z, M + 1]`.
    pub logits: Var,
    pub refined: Var,
    pub attention_weights: Vec<Var>,
}

/// The full completion transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub num_classes: usize,
    pub queries: VoxelQuerySet,
    pub cross: Vec<AttentionLayerParams>,
    pub self_layers: Vec<AttentionLayerParams>,
}

impl Stage2Model {
    pub fn new<T: Real>(config: Stage2Config, spec: &VolumeSpec<T>, num_classes: usize) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if num_classes < 2 {
            return Err(SscError::invalid("need at least one semantic class besides empty"));
        }
        let (d, ns) = (config.d, config.n_samples);
        let cross = (0..config.cross_layers)
            .map(|i| AttentionLayerParams::new(format!("cross{i}"), d, ns))
            .collect();
        let self_layers = (0..config.self_layers)
            .map(|i| AttentionLayerParams::new(format!("self{i}"), d, ns))
            .collect();
        Ok(Stage2Model {
            queries: VoxelQuerySet::new(spec.dims_at(Resolution::Query), d),
            config,
            num_classes,
            cross,
            self_layers,
        })
    }

    pub fn init_params<T: Real>(&self, rng: &mut Rng, params: &mut ParamSet<T>) {
        self.queries.init_params(rng, params);
        for l in self.cross.iter().chain(&self.self_layers) {
            l.init_params(rng, params);
        }
        let d = self.config.d;
        params.insert_normal(HEAD_W, vec![d, self.num_classes], (1.0 / d as f64).sqrt(), rng);
        params.insert_zeros(HEAD_B, vec![self.num_classes]);
    }

    /// Runs the transformer. Proposed cells come from `proposal`; views must
    /// already carry feature maps of width `d`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        views: &[CameraView<T>],
        proposal: &QueryProposal,
        spec: &VolumeSpec<T>,
    ) -> Result<Stage2Output> {
        let qset = self.queries.bind(tape, bound);
        if proposal.mask.dims() != qset.grid_dims {
            return Err(SscError::Shape {
                name: "proposal mask".into(),
                expected: qset.grid_dims.to_vec(),
                found: proposal.mask.dims().to_vec(),
            });
        }
        let mut attention_weights = Vec::new();
        let q_p = tape.gather_rows(qset.embedded, proposal.flat.clone());
        let q_hat = if self.config.cross_attention && !proposal.is_empty() {
            let layers: Vec<LayerVars> = self.cross.iter().map(|l| l.bind(bound)).collect();
            let out = cross_attend(tape, q_p, proposal, views, spec, &layers)?;
            attention_weights.extend(out.weights);
            out.features
        } else {
            q_p
        };
        let mut f3d = scatter_with_mask_tokens(tape, q_hat, proposal, &qset)?;
        if self.config.self_attention {
            let layers: Vec<LayerVars> = self.self_layers.iter().map(|l| l.bind(bound)).collect();
            let out = self_attend(tape, f3d, qset.grid_dims, &layers)?;
            attention_weights.extend(out.weights);
            f3d = out.features;
        }
        let logits = output_head(tape, f3d, spec, bound.get(HEAD_W), bound.get(HEAD_B))?;
        Ok(Stage2Output {
            logits,
            refined: f3d,
            attention_weights,
        })
    }
}
