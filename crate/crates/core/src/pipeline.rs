//! End-to-end wiring: depth occupancy, query proposal, stage-2 completion,
//! training loops and checkpoint state.

use crate::config::{OccupancySource, RunConfig};
use crate::error::{Result, SscError};
use crate::features::{FeatureExtractor, ImageFrame};
use crate::geometry::{back_project, DepthRaster, Resolution, VolumeSpec};
use crate::io::Checkpoint;
use crate::losses::{affinity_loss, semantic_loss, ClassWeights};
use crate::numerics::{Adam, Bound, ParamSet, Rng, Tape, Var};
use crate::scalar::Real;
use crate::stage1::{predict_occupancy, proposal_mask, stage1_loss, OccupancyNet, QueryMode, QueryProposal};
use crate::stage2::{CameraView, Stage2Model, Stage2Output};
use crate::voxel::{downsample_occupancy, voxelize_points, LabelGrid, OccupancyGrid};

/// RNG streams derived from the run seed.
const STREAM_STAGE1: u64 = 1;
const STREAM_STAGE2: u64 = 2;
const STREAM_PROPOSAL: u64 = 3;

/// Camera frames of one scene (current first) and the current depth raster.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput<T> {
    pub frames: Vec<ImageFrame<T>>,
    pub depth: DepthRaster<T>,
}

/// Model architecture derived from a run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub config: RunConfig,
    pub spec: VolumeSpec<f64>,
    pub occupancy_net: OccupancyNet,
    pub features: FeatureExtractor,
    pub stage2: Stage2Model,
}

impl Pipeline {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.volume;
        Ok(Pipeline {
            occupancy_net: OccupancyNet::new(&spec, config.stage1.channels)?,
            features: config.feature_extractor()?,
            stage2: Stage2Model::new(config.stage2.model(), &spec, config.num_classes())?,
            spec,
            config: config.clone(),
        })
    }

    fn spec_t<T: Real>(&self) -> VolumeSpec<T> {
        VolumeSpec {
            origin: self.spec.origin.map(T::of),
            voxel_size: T::of(self.spec.voxel_size),
            dims: self.spec.dims,
            query_dims: self.spec.query_dims,
        }
    }

    pub fn init_stage1<T: Real>(&self) -> ParamSet<T> {
        let mut rng = Rng::new(self.config.seed).fork(STREAM_STAGE1);
        let mut p = ParamSet::new();
        self.occupancy_net.init_params(&mut rng, &mut p);
        p
    }

    /// Image encoder and completion transformer parameters.
    pub fn init_stage2<T: Real>(&self) -> ParamSet<T> {
        let mut rng = Rng::new(self.config.seed).fork(STREAM_STAGE2);
        let mut p = ParamSet::new();
        self.features.init_params(&mut rng, &mut p);
        self.stage2.init_params(&mut rng, &mut p);
        p
    }

    /// `M_in`: the current depth raster lifted to ego points and voxelised.
    pub fn depth_grid<T: Real>(&self, input: &SceneInput<T>) -> Result<OccupancyGrid> {
        let frame = input
            .frames
            .first()
            .ok_or_else(|| SscError::invalid("scene has no camera frames"))?;
        let points = back_project(&input.depth, &frame.intrinsics, &frame.pose)?;
        Ok(voxelize_points(&points, &self.spec_t::<T>()))
    }

    /// Stage-1 target: ground-truth occupancy max-pooled to the query grid.
    pub fn occupancy_target(&self, gt: &LabelGrid) -> Result<OccupancyGrid> {
        downsample_occupancy(&gt.occupancy(), &self.spec)
    }

    pub fn predict_m_out<T: Real>(&self, stage1: &ParamSet<T>, m_in: &OccupancyGrid) -> Result<OccupancyGrid> {
        let mut tape = Tape::new();
        let b = stage1.bind_frozen(&mut tape);
        Ok(predict_occupancy(&mut tape, &b, &self.occupancy_net, m_in)?.1)
    }

    /// Occupancy mask feeding occupancy-mode proposals.
    pub fn occupancy_mask<T: Real>(
        &self,
        source: OccupancySource,
        stage1: Option<&ParamSet<T>>,
        input: &SceneInput<T>,
        gt: Option<&LabelGrid>,
    ) -> Result<OccupancyGrid> {
        match source {
            OccupancySource::Stage1 => {
                let p = stage1.ok_or_else(|| SscError::MissingDependency("stage-1 checkpoint".into()))?;
                self.predict_m_out(p, &self.depth_grid(input)?)
            }
            OccupancySource::RawDepth => downsample_occupancy(&self.depth_grid(input)?, &self.spec),
            OccupancySource::Oracle => {
                let gt = gt.ok_or_else(|| SscError::MissingDependency("ground truth for oracle occupancy".into()))?;
                self.occupancy_target(gt)
            }
        }
    }

    /// Proposal mask for scene number `scene`; random masks are seeded by
    /// the run seed and the scene number.
    pub fn proposal<T: Real>(
        &self,
        mode: QueryMode,
        stage1: Option<&ParamSet<T>>,
        input: &SceneInput<T>,
        gt: Option<&LabelGrid>,
        scene: u64,
    ) -> Result<OccupancyGrid> {
        let occupancy = match mode {
            QueryMode::Occupancy => self.occupancy_mask(self.config.stage2.occupancy_source, stage1, input, gt)?,
            _ => OccupancyGrid::filled(&self.spec, Resolution::Query, false),
        };
        let mut rng = Rng::new(self.config.seed).fork(STREAM_PROPOSAL).fork(scene);
        Ok(proposal_mask(mode, &occupancy, &self.spec, &mut rng))
    }

    /// Stage-2 forward pass over the first `config.frames` frames.
    pub fn stage2_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        frames: &[ImageFrame<T>],
        mask: &OccupancyGrid,
    ) -> Result<Stage2Output> {
        let n = self.config.frames;
        if frames.len() < n {
            return Err(SscError::invalid(format!("scene has {} frames, {n} configured", frames.len())));
        }
        let mut views = Vec::with_capacity(n);
        for f in &frames[..n] {
            views.push(CameraView {
                fmap: self.features.extract(tape, bound, f)?,
                intrinsics: f.intrinsics,
                pose: f.pose,
                time_index: f.time_index,
            });
        }
        let proposal = QueryProposal::from_mask(mask.clone());
        self.stage2.forward(tape, bound, &views, &proposal, &self.spec_t::<T>())
    }

    /// Weighted cross-entropy plus, when enabled, both affinity terms.
    pub fn stage2_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        gt: &LabelGrid,
        weights: &ClassWeights,
    ) -> Result<Var> {
        let ce = semantic_loss(tape, logits, gt, weights)?;
        if !self.config.stage2.affinity {
            return Ok(ce);
        }
        let aff = affinity_loss(tape, logits, gt, self.config.num_classes())?;
        Ok(tape.add(ce, aff))
    }

    /// Per-voxel argmax of `[N, C]` logits as an output-resolution grid.
    pub fn labels_from_logits<T: Real>(&self, logits: &[T]) -> LabelGrid {
        let c = self.config.num_classes();
        let mut grid = LabelGrid::filled(&self.spec, Resolution::Output, 0);
        for (dst, row) in grid.labels_mut().iter_mut().zip(logits.chunks(c)) {
            let mut best = 0;
            for (k, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = k;
                }
            }
            *dst = best as u8;
        }
        grid
    }

    /// Semantic prediction for one scene.
    pub fn infer<T: Real>(&self, stage2: &ParamSet<T>, frames: &[ImageFrame<T>], mask: &OccupancyGrid) -> Result<LabelGrid> {
        let mut tape = Tape::new();
        let b = stage2.bind_frozen(&mut tape);
        let out = self.stage2_forward(&mut tape, &b, frames, mask)?;
        let logits = tape.value(out.logits);
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(SscError::NonFinite("stage-2 logits".into()));
        }
        Ok(self.labels_from_logits(logits))
    }
}

/// One optimizer step of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub scene: usize,
    pub loss: f64,
}

/// Parameters with their optimizer.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub params: ParamSet<T>,
    pub adam: Adam<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: ParamSet<T>, lr: f64) -> Self {
        TrainState {
            params,
            adam: Adam::new(lr),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.steps_taken()
    }

    pub fn to_checkpoint(&self, stage: u8) -> Checkpoint {
        let mut ck = Checkpoint::from_params(&self.params);
        for (name, t) in self.adam.state(&self.params) {
            ck.tensors.insert(name, t.cast());
        }
        ck.meta.insert("stage".into(), stage.to_string());
        ck.meta.insert("step".into(), self.step().to_string());
        ck
    }

    /// Restores parameters (shape-checked against `self`) and optimizer state.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint, stage: u8) -> Result<()> {
        if let Some(s) = ck.meta.get("stage") {
            if s != &stage.to_string() {
                return Err(SscError::invalid(format!("checkpoint is for stage {s}, expected stage {stage}")));
            }
        }
        ck.load_params(&mut self.params, "")?;
        let step = ck.meta.get("step").map_or(Ok(0), |s| {
            s.parse::<u64>().map_err(|_| SscError::format("checkpoint", format!("bad step `{s}`")))
        })?;
        let adam = ck
            .with_prefix("")
            .into_iter()
            .filter(|(k, _)| k.starts_with("adam."))
            .map(|(k, t)| (k, t.cast::<T>()))
            .collect();
        self.adam.restore(step, &adam);
        Ok(())
    }
}

fn check_loss<T: Real>(tape: &Tape<T>, loss: Var, step: u64) -> Result<f64> {
    let v = tape.scalar_value(loss).as_f64();
    if !v.is_finite() {
        return Err(SscError::NonFinite(format!("training loss at step {step}")));
    }
    Ok(v)
}

/// Stage-1 example: depth occupancy and pooled ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Example {
    pub m_in: OccupancyGrid,
    pub target: OccupancyGrid,
}

/// Runs stage-1 steps until `until` optimizer steps have been taken. Step
/// `s` (1-based) trains on example `(s - 1) mod n`.
pub fn train_stage1<T: Real>(
    pipe: &Pipeline,
    state: &mut TrainState<T>,
    data: &[Stage1Example],
    until: u64,
    mut on_step: impl FnMut(StepRecord),
) -> Result<()> {
    if data.is_empty() && state.step() < until {
        return Err(SscError::invalid("stage-1 training needs at least one scene"));
    }
    while state.step() < until {
        let step = state.step() + 1;
        let scene = ((step - 1) % data.len() as u64) as usize;
        let ex = &data[scene];
        let mut tape = Tape::new();
        let b = state.params.bind(&mut tape);
        let logits = pipe.occupancy_net.forward(&mut tape, &b, &ex.m_in)?;
        let loss = stage1_loss(&mut tape, logits, &ex.target)?;
        let value = check_loss(&tape, loss, step)?;
        let grads = tape.backward(loss);
        state.params.accumulate(&b, &grads);
        state.adam.step(&mut state.params);
        on_step(StepRecord { step, scene, loss: value });
    }
    Ok(())
}

/// Stage-2 example: frames, a frozen proposal mask and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Example<T> {
    pub frames: Vec<ImageFrame<T>>,
    pub mask: OccupancyGrid,
    pub gt: LabelGrid,
}

pub fn train_stage2<T: Real>(
    pipe: &Pipeline,
    state: &mut TrainState<T>,
    data: &[Stage2Example<T>],
    weights: &ClassWeights,
    until: u64,
    mut on_step: impl FnMut(StepRecord),
) -> Result<()> {
    if data.is_empty() && state.step() < until {
        return Err(SscError::invalid("stage-2 training needs at least one scene"));
    }
    while state.step() < until {
        let step = state.step() + 1;
        let scene = ((step - 1) % data.len() as u64) as usize;
        let ex = &data[scene];
        let mut tape = Tape::new();
        let b = state.params.bind(&mut tape);
        let out = pipe.stage2_forward(&mut tape, &b, &ex.frames, &ex.mask)?;
        let loss = pipe.stage2_loss(&mut tape, out.logits, &ex.gt, weights)?;
        let value = check_loss(&tape, loss, step)?;
        let grads = tape.backward(loss);
        state.params.accumulate(&b, &grads);
        state.adam.step(&mut state.params);
        on_step(StepRecord { step, scene, loss: value });
    }
    Ok(())
}

/// Occupancy IoU between two grids of equal shape (1 when both are empty).
pub fn occupancy_iou(a: &OccupancyGrid, b: &OccupancyGrid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
