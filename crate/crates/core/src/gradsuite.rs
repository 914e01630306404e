//! Finite-difference checks of every differentiable operation on small
//! randomised shapes. Shared by the `gradcheck` command and the tests.

use crate::features::{FeatureExtractor, FeatureMap};
use crate::geometry::{CameraIntrinsics, CameraPose, Resolution, VolumeSpec};
use crate::losses::{affinity_loss, semantic_loss, ClassWeights};
use crate::numerics::{bilinear_sample, grad_check, Bound, GradCheckReport, ParamSet, Rng, Tape, Tensor, Var};
use crate::stage1::{stage1_loss, OccupancyNet, QueryProposal};
use crate::stage2::{
    cross_attend, deformable_attention, output_head, self_attend, AttentionLayerParams, CameraView,
};
use crate::voxel::{LabelGrid, OccupancyGrid};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const OPERATIONS: [&str; 9] = [
    "bilinear_sample",
    "deformable_attention",
    "cross_attend",
    "self_attend",
    "output_head",
    "semantic_loss",
    "affinity_loss",
    "stage1_loss",
    "extract_features",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }
}

fn normal(shape: Vec<usize>, rng: &mut Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

fn sum_of_squares(tape: &mut Tape<f64>, x: Var) -> Var {
    let sq = tape.mul(x, x);
    tape.sum(sq)
}

/// Layer parameters with randomised heads so offsets and weights matter.
fn random_layer(prefix: &str, d: usize, ns: usize, rng: &mut Rng) -> (AttentionLayerParams, ParamSet<f64>) {
    let l = AttentionLayerParams::new(prefix, d, ns);
    let mut p = ParamSet::new();
    l.init_params(rng, &mut p);
    for (name, t) in p.iter_mut() {
        if name.contains("offset") || name.contains("attn") || name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.2 * rng.normal());
        }
    }
    (l, p)
}

/// Zero-initialised biases put dead ReLU units exactly on their kink.
fn randomise_biases(p: &mut ParamSet<f64>, rng: &mut Rng) {
    for (name, t) in p.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.1 * rng.normal());
        }
    }
}

/// Parameters first, then `extra` tensors, as one grad-check input list.
fn with_params(p: &ParamSet<f64>, extra: Vec<Tensor<f64>>) -> (Vec<String>, Vec<Tensor<f64>>) {
    let names = p.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = p.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(extra);
    (names, inputs)
}

fn bind(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// Reference point kept at least half a cell away from grid lines, where
/// bilinear interpolation is not differentiable.
fn off_grid(rng: &mut Rng, hi: f64) -> f64 {
    rng.below(hi as usize - 1) as f64 + rng.uniform(0.2, 0.8)
}

fn check_bilinear(rng: &mut Rng) -> GradCheckReport {
    let (h, w, d) = (rng.range_inclusive(3, 6), rng.range_inclusive(3, 6), rng.range_inclusive(1, 4));
    let map = normal(vec![h, w, d], rng, 1.0);
    let pt = Tensor::vector(vec![off_grid(rng, w as f64), off_grid(rng, h as f64)]);
    grad_check(
        |tape, v| {
            let s = bilinear_sample(tape, v[0], v[1]);
            sum_of_squares(tape, s)
        },
        &[map, pt],
        STEP,
    )
}

fn check_deformable(rng: &mut Rng) -> GradCheckReport {
    let (d, ns) = (rng.range_inclusive(2, 4), rng.range_inclusive(1, 3));
    let (h, w, n) = (rng.range_inclusive(4, 6), rng.range_inclusive(4, 6), rng.range_inclusive(1, 3));
    let (l, p) = random_layer("l", d, ns, rng);
    let refs: Vec<[f64; 2]> = (0..n).map(|_| [off_grid(rng, w as f64), off_grid(rng, h as f64)]).collect();
    let (names, inputs) = with_params(&p, vec![normal(vec![h, w, d], rng, 1.0), normal(vec![n, d], rng, 1.0)]);
    let np = names.len();
    grad_check(
        |tape, v| {
            let b = bind(&names, &v[..np]);
            let (out, _) = deformable_attention(tape, &l.bind(&b), v[np + 1], &refs, v[np]);
            sum_of_squares(tape, out)
        },
        &inputs,
        STEP,
    )
}

fn small_spec() -> VolumeSpec<f64> {
    VolumeSpec::new([0.0, -1.0, 0.0], 0.5, [4, 4, 2], [4, 4, 2]).expect("valid spec")
}

fn check_cross_attend(rng: &mut Rng) -> GradCheckReport {
    let spec = small_spec();
    let d = rng.range_inclusive(2, 3);
    let (l, p) = random_layer("c", d, 2, rng);
    let mut mask = OccupancyGrid::filled(&spec, Resolution::Query, false);
    let cells = rng.range_inclusive(1, 4);
    for _ in 0..cells {
        let c = rng.below(mask.len());
        mask.labels_mut()[c] = true;
    }
    let proposal = QueryProposal::from_mask(mask);
    let nviews = rng.range_inclusive(1, 2);
    let intr = CameraIntrinsics::new(8.0, 8.0, 7.5, 5.5, 16, 12).expect("valid intrinsics");
    let poses: Vec<CameraPose<f64>> = (0..nviews)
        .map(|_| CameraPose::look_at([-3.0, rng.uniform(-0.5, 0.5), 1.5], [1.0, 0.0, 0.5]).expect("valid pose"))
        .collect();
    let mut extra: Vec<Tensor<f64>> = (0..nviews).map(|_| normal(vec![12, 16, d], rng, 1.0)).collect();
    extra.push(normal(vec![proposal.len(), d], rng, 1.0));
    let (names, inputs) = with_params(&p, extra);
    let np = names.len();
    grad_check(
        |tape, v| {
            let b = bind(&names, &v[..np]);
            let views: Vec<CameraView<f64>> = poses
                .iter()
                .enumerate()
                .map(|(t, pose)| CameraView {
                    fmap: FeatureMap {
                        var: v[np + t],
                        rows: 12,
                        cols: 16,
                        channels: d,
                        stride: 1,
                    },
                    intrinsics: intr,
                    pose: *pose,
                    time_index: t,
                })
                .collect();
            let out = cross_attend(tape, v[np + nviews], &proposal, &views, &spec, &[l.bind(&b)]).expect("cross_attend");
            sum_of_squares(tape, out.features)
        },
        &inputs,
        STEP,
    )
}

fn check_self_attend(rng: &mut Rng) -> GradCheckReport {
    let d = rng.range_inclusive(2, 3);
    let ns = rng.range_inclusive(1, 2);
    let dims = [2 * rng.range_inclusive(1, 2), 2 * rng.range_inclusive(1, 2), rng.range_inclusive(1, 2)];
    let (l, p) = random_layer("s", d, ns, rng);
    let (names, inputs) = with_params(&p, vec![normal(vec![dims.iter().product(), d], rng, 1.0)]);
    let np = names.len();
    grad_check(
        |tape, v| {
            let b = bind(&names, &v[..np]);
            let out = self_attend(tape, v[np], dims, &[l.bind(&b)]).expect("self_attend");
            sum_of_squares(tape, out.features)
        },
        &inputs,
        STEP,
    )
}

fn check_output_head(rng: &mut Rng) -> GradCheckReport {
    let factor = rng.range_inclusive(1, 2);
    let q = [2, 2, rng.range_inclusive(1, 2)];
    let spec = VolumeSpec::new([0.0; 3], 0.5, q.map(|n| n * factor), q).expect("valid spec");
    let (d, c) = (rng.range_inclusive(2, 3), rng.range_inclusive(2, 4));
    let inputs = vec![
        normal(vec![q.iter().product(), d], rng, 1.0),
        normal(vec![d, c], rng, 1.0),
        normal(vec![c], rng, 1.0),
    ];
    grad_check(
        |tape, v| {
            let out = output_head(tape, v[0], &spec, v[1], v[2]).expect("output_head");
            sum_of_squares(tape, out)
        },
        &inputs,
        STEP,
    )
}

fn random_labels(dims: [usize; 3], classes: usize, rng: &mut Rng) -> LabelGrid {
    let n = dims.iter().product();
    LabelGrid::new(dims, [0.0; 3], 1.0, (0..n).map(|_| rng.below(classes) as u8).collect()).expect("valid grid")
}

fn check_semantic(rng: &mut Rng) -> GradCheckReport {
    let c = rng.range_inclusive(2, 4);
    let dims = [rng.range_inclusive(1, 3), 2, 2];
    let gt = random_labels(dims, c, rng);
    let weights = ClassWeights {
        weights: (0..c).map(|_| rng.uniform(0.2, 2.0)).collect(),
    };
    let x = normal(vec![gt.len(), c], rng, 1.0);
    grad_check(|tape, v| semantic_loss(tape, v[0], &gt, &weights).expect("semantic_loss"), &[x], STEP)
}

fn check_affinity(rng: &mut Rng) -> GradCheckReport {
    let c = rng.range_inclusive(2, 4);
    let dims = [rng.range_inclusive(1, 3), 2, 2];
    let gt = random_labels(dims, c, rng);
    let x = normal(vec![gt.len(), c], rng, 1.0);
    grad_check(|tape, v| affinity_loss(tape, v[0], &gt, c).expect("affinity_loss"), &[x], STEP)
}

/// Stage-1 loss backpropagated through the occupancy network.
fn check_stage1(rng: &mut Rng) -> GradCheckReport {
    let spec = VolumeSpec::new([0.0; 3], 0.5, [8, 8, 4], [4, 4, 2]).expect("valid spec");
    let net = OccupancyNet::new(&spec, [rng.range_inclusive(2, 3), rng.range_inclusive(2, 4)]).expect("valid net");
    let mut p = ParamSet::new();
    net.init_params(rng, &mut p);
    randomise_biases(&mut p, rng);
    let mut m_in = OccupancyGrid::filled(&spec, Resolution::Output, false);
    m_in.labels_mut().iter_mut().for_each(|b| *b = rng.bernoulli(0.3));
    let mut target = OccupancyGrid::filled(&spec, Resolution::Query, false);
    target.labels_mut().iter_mut().for_each(|b| *b = rng.bernoulli(0.5));
    let (names, inputs) = with_params(&p, Vec::new());
    grad_check(
        |tape, v| {
            let b = bind(&names, v);
            let logits = net.forward(tape, &b, &m_in).expect("forward");
            stage1_loss(tape, logits, &target).expect("stage1_loss")
        },
        &inputs,
        STEP,
    )
}

/// Feature extractor, differentiated with respect to weights and pixels.
fn check_features(rng: &mut Rng) -> GradCheckReport {
    let first = [1, 2][rng.below(2)];
    let fx = FeatureExtractor::with_layers(vec![first, 2, 1], vec![rng.range_inclusive(2, 4), 4, rng.range_inclusive(2, 3)]);
    let mut p = ParamSet::new();
    fx.init_params(rng, &mut p);
    randomise_biases(&mut p, rng);
    let (w, h) = (8 * rng.range_inclusive(1, 2), 8);
    let (rows, cols) = fx.output_size(w, h).expect("valid size");
    let (names, inputs) = with_params(&p, vec![Tensor::from_fn(vec![h, w, 3], |_| rng.unit())]);
    let np = names.len();
    grad_check(
        |tape, v| {
            let b = bind(&names, &v[..np]);
            let fm = fx.extract_from(tape, &b, v[np], rows, cols).expect("extract");
            sum_of_squares(tape, fm.var)
        },
        &inputs,
        STEP,
    )
}

/// Checks one operation at one seed.
pub fn check_op(op: &str, seed: u64) -> Option<OpCheck> {
    let idx = OPERATIONS.iter().position(|&o| o == op)?;
    let mut rng = Rng::new(seed).fork(idx as u64);
    let report = match idx {
        0 => check_bilinear(&mut rng),
        1 => check_deformable(&mut rng),
        2 => check_cross_attend(&mut rng),
        3 => check_self_attend(&mut rng),
        4 => check_output_head(&mut rng),
        5 => check_semantic(&mut rng),
        6 => check_affinity(&mut rng),
        7 => check_stage1(&mut rng),
        _ => check_features(&mut rng),
    };
    Some(OpCheck {
        op: OPERATIONS[idx],
        seed,
        report,
    })
}

/// Every operation at seeds `first..first + count`.
pub fn run_suite(first: u64, count: u64) -> Vec<OpCheck> {
    let mut out = Vec::new();
    for op in OPERATIONS {
        for seed in first..first + count {
            out.extend(check_op(op, seed));
        }
    }
    out
}
