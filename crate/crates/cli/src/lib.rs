//! Commands behind the `ssc` binary: dataset synthesis, two-stage training,
//! inference, evaluation and gradient checking.
//!
//! Every command is deterministic for a fixed configuration and writes
//! machine-parseable output.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ssc_core::config::{OccupancySource, RunConfig};
use ssc_core::dataset::{write_dataset, Manifest, SceneRecord};
use ssc_core::gradsuite::{run_suite, OpCheck};
use ssc_core::io::{self, Checkpoint};
use ssc_core::losses::compute_class_weights;
use ssc_core::metrics::{confusion_by_range, Confusion, MetricsReport};
use ssc_core::pipeline::{train_stage1, train_stage2, Pipeline, Stage1Example, Stage2Example, StepRecord, TrainState};
use ssc_core::stage1::QueryMode;
use ssc_core::voxel::{LabelGrid, OccupancyGrid};
use ssc_core::{ParamSet64, Result, SscError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

/// Caps the number of evaluation worker threads.
pub const THREADS_ENV: &str = "SSC_THREADS";

pub fn exit_code(err: &SscError) -> i32 {
    match err {
        SscError::Io { .. } | SscError::Format { .. } => EXIT_IO,
        SscError::MissingDependency(_) => EXIT_MISSING,
        SscError::Shape { .. } => EXIT_SHAPE,
        SscError::NonFinite(_) => EXIT_NUMERIC,
        SscError::Invalid(_) => EXIT_USAGE,
    }
}

/// Command-line settings layered over a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub frames: Option<usize>,
    pub ranges: Option<Vec<f64>>,
    pub query_mode: Option<QueryMode>,
    pub occupancy_source: Option<OccupancySource>,
    pub feature_stride: Option<usize>,
    pub depth_noise: Option<f64>,
    pub no_self_attention: bool,
    pub no_cross_attention: bool,
    pub no_affinity: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.frames {
            cfg.frames = f;
        }
        if let Some(r) = &self.ranges {
            cfg.eval.ranges = r.clone();
        }
        if let Some(m) = self.query_mode {
            cfg.stage2.query_mode = m;
        }
        if let Some(s) = self.occupancy_source {
            cfg.stage2.occupancy_source = s;
        }
        if let Some(s) = self.feature_stride {
            cfg.feature_stride = s;
        }
        if let Some(n) = self.depth_noise {
            cfg.depth_noise = n;
        }
        cfg.stage2.self_attention &= !self.no_self_attention;
        cfg.stage2.cross_attention &= !self.no_cross_attention;
        cfg.stage2.affinity &= !self.no_affinity;
    }
}

/// Reads `path` (defaults when absent), applies overrides and validates.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => io::read_toml(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(cfg: &RunConfig, count: usize, out_dir: &Path) -> Result<Manifest> {
    let m = write_dataset(cfg, count, out_dir)?;
    log::info!("wrote {} scenes to {}", m.scenes.len(), out_dir.display());
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Stage-1 checkpoint feeding stage-2 occupancy proposals.
    pub stage1: Option<PathBuf>,
    /// Continue from `out_checkpoint` when it exists.
    pub resume: bool,
    /// Overrides the configured step count.
    pub steps: Option<u64>,
    /// Loss log path; defaults to the checkpoint path with a `.log` extension.
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub stage: u8,
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn log_path(out_checkpoint: &Path, options: &TrainOptions) -> PathBuf {
    options.log.clone().unwrap_or_else(|| out_checkpoint.with_extension("log"))
}

/// One loss-log line: step, scene and loss at full precision.
pub fn format_step(r: &StepRecord) -> String {
    format!("{} {} {:e}\n", r.step, r.scene, r.loss)
}

/// Parses a loss log back into records.
pub fn parse_log(text: &str) -> Result<Vec<StepRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || SscError::format("loss log", format!("bad line `{line}`"));
            let mut it = line.split_whitespace();
            let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let scene = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let loss = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            Ok(StepRecord { step, scene, loss })
        })
        .collect()
}

pub fn load_stage1(pipe: &Pipeline, path: &Path) -> Result<ParamSet64> {
    let mut state = TrainState::new(pipe.init_stage1::<f64>(), pipe.config.stage1.lr);
    state.load_checkpoint(&Checkpoint::read(path)?, 1)?;
    Ok(state.params)
}

pub fn load_stage2(pipe: &Pipeline, path: &Path) -> Result<ParamSet64> {
    let mut state = TrainState::new(pipe.init_stage2::<f64>(), pipe.config.stage2.lr);
    state.load_checkpoint(&Checkpoint::read(path)?, 2)?;
    Ok(state.params)
}

/// Whether stage-2 proposals need a trained occupancy network.
pub fn needs_stage1(cfg: &RunConfig) -> bool {
    cfg.stage2.query_mode == QueryMode::Occupancy && cfg.stage2.occupancy_source == OccupancySource::Stage1
}

fn load_optional_stage1(pipe: &Pipeline, path: Option<&Path>) -> Result<Option<ParamSet64>> {
    match path {
        Some(p) if needs_stage1(&pipe.config) => load_stage1(pipe, p).map(Some),
        None if needs_stage1(&pipe.config) => Err(SscError::MissingDependency(
            "stage-1 checkpoint (pass one, or choose another query mode or occupancy source)".into(),
        )),
        _ => Ok(None),
    }
}

/// Proposal masks for every scene of a dataset.
pub fn proposal_masks(
    pipe: &Pipeline,
    stage1: Option<&ParamSet64>,
    scenes: &[SceneRecord<f64>],
) -> Result<Vec<OccupancyGrid>> {
    scenes
        .iter()
        .map(|s| pipe.proposal(pipe.config.stage2.query_mode, stage1, &s.input, Some(&s.gt), s.index as u64))
        .collect()
}

/// Trains one stage on every scene of `dataset` and writes the checkpoint
/// and loss log.
pub fn cmd_train(
    stage: u8,
    cfg: &RunConfig,
    dataset: &Path,
    out_checkpoint: &Path,
    options: &TrainOptions,
) -> Result<TrainSummary> {
    let pipe = Pipeline::new(cfg)?;
    let manifest = Manifest::read(dataset)?;
    let log = log_path(out_checkpoint, options);
    let resume = options.resume && out_checkpoint.exists();
    let (init, lr, configured) = match stage {
        1 => (pipe.init_stage1::<f64>(), cfg.stage1.lr, cfg.stage1.steps),
        2 => (pipe.init_stage2::<f64>(), cfg.stage2.lr, cfg.stage2.steps),
        s => return Err(SscError::invalid(format!("stage must be 1 or 2, got {s}"))),
    };
    let until = options.steps.unwrap_or(configured);
    let mut state = TrainState::new(init, lr);
    if resume {
        state.load_checkpoint(&Checkpoint::read(out_checkpoint)?, stage)?;
    }
    // stage-2 dependencies are resolved before any file is touched
    let stage1 = if stage == 2 {
        load_optional_stage1(&pipe, options.stage1.as_deref())?
    } else {
        None
    };
    let scenes: Vec<SceneRecord<f64>> = manifest.load_all(dataset, cfg.frames)?;

    if let Some(dir) = log.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| SscError::io(dir, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log)
        .map_err(|e| SscError::io(&log, e))?;
    let mut write_err = None;
    let mut last_loss = None;
    let mut on_step = |r: StepRecord| {
        last_loss = Some(r.loss);
        if write_err.is_none() {
            if let Err(e) = file.write_all(format_step(&r).as_bytes()) {
                write_err = Some(e);
            }
        }
        if r.step % 100 == 0 {
            log::info!("stage {stage} step {} loss {:.6}", r.step, r.loss);
        }
    };

    let trained = if stage == 1 {
        let data = scenes
            .iter()
            .map(|s| {
                Ok(Stage1Example {
                    m_in: pipe.depth_grid(&s.input)?,
                    target: pipe.occupancy_target(&s.gt)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        train_stage1(&pipe, &mut state, &data, until, &mut on_step)
    } else {
        let masks = proposal_masks(&pipe, stage1.as_ref(), &scenes)?;
        let gts: Vec<LabelGrid> = scenes.iter().map(|s| s.gt.clone()).collect();
        let weights = compute_class_weights(&gts, cfg.num_classes())?;
        let data: Vec<Stage2Example<f64>> = scenes
            .into_iter()
            .zip(masks)
            .map(|(s, mask)| Stage2Example {
                frames: s.input.frames,
                mask,
                gt: s.gt,
            })
            .collect();
        train_stage2(&pipe, &mut state, &data, &weights, until, &mut on_step)
    };
    if let Some(e) = write_err {
        return Err(SscError::io(&log, e));
    }
    let mut ck = state.to_checkpoint(stage);
    ck.meta.insert("seed".into(), cfg.seed.to_string());
    // a failed run still leaves its progress behind
    ck.write(out_checkpoint)?;
    trained?;
    Ok(TrainSummary {
        stage,
        steps: state.step(),
        last_loss,
        checkpoint: out_checkpoint.to_path_buf(),
        log,
    })
}

/// Checkpoints used by inference and evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelPaths {
    pub stage1: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
}

struct Models {
    stage1: Option<ParamSet64>,
    stage2: ParamSet64,
}

fn load_models(pipe: &Pipeline, paths: &ModelPaths) -> Result<Models> {
    let stage2 = paths
        .stage2
        .as_deref()
        .ok_or_else(|| SscError::MissingDependency("stage-2 checkpoint".into()))?;
    Ok(Models {
        stage1: load_optional_stage1(pipe, paths.stage1.as_deref())?,
        stage2: load_stage2(pipe, stage2)?,
    })
}

/// Proposal mask and semantic prediction for one scene.
fn predict(pipe: &Pipeline, models: &Models, scene: &SceneRecord<f64>) -> Result<(OccupancyGrid, LabelGrid)> {
    let mask = pipe.proposal(
        pipe.config.stage2.query_mode,
        models.stage1.as_ref(),
        &scene.input,
        Some(&scene.gt),
        scene.index as u64,
    )?;
    let pred = pipe.infer(&models.stage2, &scene.input.frames, &mask)?;
    Ok((mask, pred))
}

/// Writes `scene_XXXX.vox` (labels) and `scene_XXXX.mask.vox` (proposal)
/// for every scene.
pub fn cmd_infer(cfg: &RunConfig, models: &ModelPaths, dataset: &Path, out_dir: &Path) -> Result<Vec<LabelGrid>> {
    let pipe = Pipeline::new(cfg)?;
    let manifest = Manifest::read(dataset)?;
    let models = load_models(&pipe, models)?;
    let mut out = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let scene = manifest.load(dataset, entry, cfg.frames)?;
        let (mask, pred) = predict(&pipe, &models, &scene)?;
        io::write_labels(&out_dir.join(format!("scene_{:04}.vox", entry.index)), &pred)?;
        io::write_occupancy(&out_dir.join(format!("scene_{:04}.mask.vox", entry.index)), &mask)?;
        out.push(pred);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub index: usize,
    pub seed: u64,
    pub proposed: usize,
    pub confusion: Vec<(f64, Confusion)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub scenes: Vec<SceneEval>,
    /// Metrics of the summed per-scene confusion matrices.
    pub aggregate: MetricsReport,
    pub aggregate_confusion: Vec<(f64, Confusion)>,
}

#[derive(Serialize)]
struct RangeFile {
    range_m: f64,
    iou: f64,
    precision: f64,
    recall: f64,
    miou: f64,
    /// NaN marks a class absent from both grids.
    class_iou: Vec<f64>,
    /// Row = ground truth, column = prediction.
    confusion: Vec<Vec<u64>>,
}

#[derive(Serialize)]
struct ReportFile {
    scene: Option<usize>,
    seed: Option<u64>,
    proposed_queries: Option<usize>,
    ranges: Vec<RangeFile>,
}

fn report_file(
    scene: Option<&SceneEval>,
    conf: &[(f64, Confusion)],
    report: &MetricsReport,
) -> ReportFile {
    ReportFile {
        scene: scene.map(|s| s.index),
        seed: scene.map(|s| s.seed),
        proposed_queries: scene.map(|s| s.proposed),
        ranges: report
            .ranges
            .iter()
            .zip(conf)
            .map(|(m, (_, c))| RangeFile {
                range_m: m.range_m,
                iou: m.iou,
                precision: m.precision,
                recall: m.recall,
                miou: m.miou,
                class_iou: m.class_iou.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
                confusion: (0..c.classes()).map(|g| (0..c.classes()).map(|p| c.get(g, p)).collect()).collect(),
            })
            .collect(),
    }
}

fn write_report(dir: &Path, stem: &str, file: &ReportFile, report: &MetricsReport) -> Result<()> {
    io::write_toml(&dir.join(format!("{stem}.toml")), file)?;
    io::write_bytes(&dir.join(format!("{stem}.txt")), report.to_text().as_bytes())
}

/// Worker count: `SSC_THREADS` when set to a positive integer, else the
/// available parallelism.
pub fn eval_threads() -> usize {
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Runs the full pipeline on every scene and writes `scene_XXXX.{toml,txt}`
/// plus `aggregate.{toml,txt}` to `out_dir`. With `bypass` the ground truth
/// stands in for the prediction and no checkpoint is read.
pub fn cmd_eval(
    cfg: &RunConfig,
    models: &ModelPaths,
    dataset: &Path,
    out_dir: &Path,
    bypass: bool,
) -> Result<EvalSummary> {
    let pipe = Pipeline::new(cfg)?;
    let manifest = Manifest::read(dataset)?;
    let models = if bypass { None } else { Some(load_models(&pipe, models)?) };
    let ranges = &cfg.eval.ranges;
    let classes = cfg.num_classes();

    let eval_one = |i: usize| -> Result<SceneEval> {
        let entry = &manifest.scenes[i];
        let scene = manifest.load::<f64>(dataset, entry, cfg.frames)?;
        let (proposed, pred) = match &models {
            Some(m) => {
                let (mask, pred) = predict(&pipe, m, &scene)?;
                (mask.popcount(), pred)
            }
            None => (0, scene.gt.clone()),
        };
        Ok(SceneEval {
            index: entry.index,
            seed: entry.seed,
            proposed,
            confusion: confusion_by_range(&pred, &scene.gt, classes, ranges)?,
        })
    };

    let n = manifest.scenes.len();
    let threads = eval_threads().clamp(1, n.max(1));
    let mut results: Vec<Option<Result<SceneEval>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let eval_one = &eval_one;
                s.spawn(move || (t..n).step_by(threads).map(|i| (i, eval_one(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let scenes = results
        .into_iter()
        .map(|r| r.expect("every scene evaluated"))
        .collect::<Result<Vec<_>>>()?;

    let mut aggregate_confusion: Vec<(f64, Confusion)> = ranges.iter().map(|&r| (r, Confusion::new(classes))).collect();
    for s in &scenes {
        for ((_, acc), (_, c)) in aggregate_confusion.iter_mut().zip(&s.confusion) {
            acc.merge(c);
        }
        let report = MetricsReport::from_confusions(&s.confusion);
        write_report(out_dir, &format!("scene_{:04}", s.index), &report_file(Some(s), &s.confusion, &report), &report)?;
    }
    let aggregate = MetricsReport::from_confusions(&aggregate_confusion);
    write_report(out_dir, "aggregate", &report_file(None, &aggregate_confusion, &aggregate), &aggregate)?;
    Ok(EvalSummary {
        scenes,
        aggregate,
        aggregate_confusion,
    })
}

/// Runs the finite-difference suite for seeds `first..first + count`.
pub fn cmd_gradcheck(first: u64, count: u64) -> Vec<OpCheck> {
    run_suite(first, count)
}

/// One line per check: op, seed, verdict and worst relative error.
pub fn gradcheck_text(checks: &[OpCheck]) -> String {
    let mut out = String::new();
    for c in checks {
        let _ = writeln!(
            out,
            "op={} seed={} status={} max_rel_error={:e} coords={}",
            c.op,
            c.seed,
            if c.passed() { "pass" } else { "fail" },
            c.report.max_rel_error,
            c.report.coords_checked
        );
    }
    out
}

/// Parses `--ranges` values such as `3.2,6.4,12.8`.
pub fn parse_ranges(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad range `{p}`: {e}")))
        .collect()
}
