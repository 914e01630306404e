use std::path::Path;
use std::process::Command;

use ssc_cli::*;
use ssc_core::config::{OccupancySource, RunConfig};
use ssc_core::dataset::Manifest;
use ssc_core::io::Checkpoint;
use ssc_core::metrics::{confusion_by_range, MetricsReport};
use ssc_core::pipeline::Pipeline;
use ssc_core::stage1::QueryMode;

fn ssc(args: &[&str]) -> (i32, String, String) {
    ssc_with(args, &[])
}

fn ssc_with(args: &[&str], env: &[(&str, &str)]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ssc"))
        .args(args)
        .envs(env.iter().copied())
        .output()
        .expect("run ssc");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn synth(dir: &Path, count: usize, frames: usize) -> Manifest {
    let cfg = RunConfig {
        frames,
        ..RunConfig::default()
    };
    cmd_synth(&cfg, count, dir).unwrap()
}

fn steps(n: u64) -> TrainOptions {
    TrainOptions {
        steps: Some(n),
        ..TrainOptions::default()
    }
}

#[test]
fn single_scene_manifest_references_existing_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 1, 2);
    assert_eq!(m.scenes.len(), 1);
    let e = &m.scenes[0];
    let mut paths = vec![e.scene.clone(), e.gt.clone()];
    for f in &e.frames {
        paths.extend([f.image.clone(), f.depth.clone(), f.camera.clone()]);
    }
    for p in paths {
        assert!(dir.path().join(&p).is_file(), "{}", p.display());
    }
}

#[test]
fn zero_steps_keep_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 1, 1);
    let cfg = RunConfig::default();
    let ck = dir.path().join("s1.ck");
    let s = cmd_train(1, &cfg, &data, &ck, &steps(0)).unwrap();
    assert_eq!((s.steps, s.last_loss), (0, None));
    assert_eq!(std::fs::read_to_string(&s.log).unwrap(), "");
    let init = Pipeline::new(&cfg).unwrap().init_stage1::<f64>();
    let saved = Checkpoint::read(&ck).unwrap();
    assert_eq!(saved.with_prefix(""), Checkpoint::from_params(&init).with_prefix(""));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, 1);
    let mut cfg = RunConfig::default();
    cfg.stage2.occupancy_source = OccupancySource::RawDepth;
    let (a, b) = (dir.path().join("a.ck"), dir.path().join("b.ck"));
    cmd_train(2, &cfg, &data, &a, &steps(3)).unwrap();
    let resume = TrainOptions {
        resume: true,
        ..steps(6)
    };
    cmd_train(2, &cfg, &data, &a, &resume).unwrap();
    cmd_train(2, &cfg, &data, &b, &steps(6)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log_a = std::fs::read_to_string(a.with_extension("log")).unwrap();
    assert_eq!(log_a, std::fs::read_to_string(b.with_extension("log")).unwrap());
    let records = parse_log(&log_a).unwrap();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    assert_eq!(records.iter().map(|r| r.scene).collect::<Vec<_>>(), vec![0, 1, 0, 1, 0, 1]);
}

#[test]
fn bypass_scores_one_hundred_percent() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, 1);
    let s = cmd_eval(&RunConfig::default(), &ModelPaths::default(), &data, &dir.path().join("eval"), true).unwrap();
    for r in &s.aggregate.ranges {
        assert_eq!((r.iou, r.precision, r.recall, r.miou), (1.0, 1.0, 1.0, 1.0));
    }
    assert!(dir.path().join("eval/aggregate.toml").is_file());
    assert!(dir.path().join("eval/scene_0001.txt").is_file());
}

#[test]
fn dense_and_occupancy_modes_both_report_and_aggregate_sums_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 3, 1);
    let mut results = Vec::new();
    for mode in [QueryMode::Occupancy, QueryMode::Dense] {
        let mut cfg = RunConfig::default();
        cfg.stage2.query_mode = mode;
        cfg.stage2.occupancy_source = OccupancySource::Oracle;
        let ck = dir.path().join(format!("{mode}.ck").replace(':', "_"));
        cmd_train(2, &cfg, &data, &ck, &steps(2)).unwrap();
        let out = dir.path().join(format!("eval_{}", results.len()));
        let models = ModelPaths {
            stage1: None,
            stage2: Some(ck.clone()),
        };
        let s = cmd_eval(&cfg, &models, &data, &out, false).unwrap();
        assert_eq!(s.scenes.len(), 3);
        assert_eq!(s.aggregate.ranges.len(), cfg.eval.ranges.len());

        // recount from the written predictions
        let preds = cmd_infer(&cfg, &models, &data, &dir.path().join(format!("pred_{}", results.len()))).unwrap();
        let manifest = Manifest::read(&data).unwrap();
        let records = manifest.load_all::<f64>(&data, 1).unwrap();
        let mut summed: Vec<(f64, ssc_core::metrics::Confusion)> = Vec::new();
        for (pred, rec) in preds.iter().zip(&records) {
            let c = confusion_by_range(pred, &rec.gt, cfg.num_classes(), &cfg.eval.ranges).unwrap();
            if summed.is_empty() {
                summed = c;
            } else {
                for ((_, acc), (_, x)) in summed.iter_mut().zip(&c) {
                    acc.merge(x);
                }
            }
        }
        assert_eq!(s.aggregate_confusion, summed);
        assert_eq!(s.aggregate, MetricsReport::from_confusions(&summed));
        results.push(s);
    }
    let dense_proposed: Vec<usize> = results[1].scenes.iter().map(|s| s.proposed).collect();
    assert!(dense_proposed.iter().all(|&n| n == 16 * 16 * 4));
}

#[test]
fn eval_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 3, 1);
    let ck = dir.path().join("s2.ck");
    let mut cfg = RunConfig::default();
    cfg.stage2.occupancy_source = OccupancySource::RawDepth;
    cmd_train(2, &cfg, &data, &ck, &steps(1)).unwrap();
    let dump = |threads: &str, out: &str| {
        let (code, stdout, err) = ssc_with(&[
            "eval",
            "--occupancy-source",
            "raw-depth",
            "--dataset",
            data.to_str().unwrap(),
            "--stage2",
            ck.to_str().unwrap(),
            "--out",
            dir.path().join(out).to_str().unwrap(),
        ], &[(THREADS_ENV, threads)]);
        assert_eq!(code, 0, "{err}");
        stdout
    };
    let one = dump("1", "e1");
    let three = dump("3", "e3");
    assert_eq!(one, three);
    for f in ["aggregate.toml", "scene_0002.toml"] {
        assert_eq!(
            std::fs::read(dir.path().join("e1").join(f)).unwrap(),
            std::fs::read(dir.path().join("e3").join(f)).unwrap()
        );
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let (code, out, _) = ssc(&["synth", "--count", "2", "--out", d]);
    assert_eq!(code, 0);
    assert!(out.starts_with("scenes=2 "));

    let (code, _, err) = ssc(&["synth", "--out", "/proc/forbidden/data"]);
    assert_eq!(code, EXIT_IO, "{err}");

    let s2 = dir.path().join("s2.ck");
    let (code, _, err) = ssc(&["train", "--stage", "2", "--dataset", d, "--out", s2.to_str().unwrap()]);
    assert_eq!(code, EXIT_MISSING, "{err}");
    assert!(!s2.exists());

    let (code, _, _) = ssc(&[
        "train", "--stage", "2", "--dataset", d, "--out", s2.to_str().unwrap(), "--steps", "1", "--query-mode", "dense",
    ]);
    assert_eq!(code, 0);
    let cfg = dir.path().join("narrow.toml");
    std::fs::write(&cfg, "[stage2]\nd = 16\nquery_mode = \"dense\"\n").unwrap();
    let (code, _, err) = ssc(&[
        "eval", "--config", cfg.to_str().unwrap(), "--dataset", d, "--stage2", s2.to_str().unwrap(), "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_SHAPE, "{err}");
    assert!(err.contains("`"), "message names the tensor: {err}");

    let (code, _, _) = ssc(&["train", "--stage", "3", "--dataset", d, "--out", "x.ck"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = ssc(&["eval", "--query-mode", "sparse", "--dataset", d, "--out", "x"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn gradcheck_command_reports_every_operation() {
    let (code, out, _) = ssc(&["gradcheck", "--seeds", "1", "--seed", "3"]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.last(), Some(&"checks=9 failed=0"));
    assert!(lines[..9].iter().all(|l| l.contains("seed=3 status=pass")));
}

#[test]
fn overrides_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    let mut base = RunConfig::default();
    base.stage2.steps = 7;
    base.save(&path).unwrap();
    let ov = Overrides {
        seed: Some(4),
        frames: Some(3),
        ranges: Some(parse_ranges("1.6, 3.2").unwrap()),
        query_mode: Some(QueryMode::Random(10.0)),
        feature_stride: Some(8),
        no_self_attention: true,
        ..Overrides::default()
    };
    let cfg = load_config(Some(&path), &ov).unwrap();
    assert_eq!((cfg.seed, cfg.frames, cfg.feature_stride, cfg.stage2.steps), (4, 3, 8, 7));
    assert_eq!(cfg.eval.ranges, vec![1.6, 3.2]);
    assert!(!cfg.stage2.self_attention && cfg.stage2.cross_attention);
    assert_eq!(RunConfig::load(&path).unwrap(), base);
    assert!(parse_ranges("1,x").is_err());
    let bad = Overrides {
        frames: Some(0),
        ..Overrides::default()
    };
    assert!(load_config(None, &bad).is_err());
}
