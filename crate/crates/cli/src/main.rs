use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ssc_cli::*;
use ssc_core::config::OccupancySource;
use ssc_core::stage1::QueryMode;
use ssc_core::{Result, SscError};

#[derive(Parser, Debug)]
#[command(name = "ssc", version, about = "Two-stage voxel semantic scene completion")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Camera frames per scene, current frame first.
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Evaluation ranges in metres, comma separated.
    #[arg(long, global = true, value_parser = parse_ranges)]
    ranges: Option<Vec<f64>>,
    /// occupancy, dense or random:p
    #[arg(long, global = true)]
    query_mode: Option<QueryMode>,
    #[arg(long, global = true, value_enum)]
    occupancy_source: Option<Source>,
    /// Image feature downsampling (power of two).
    #[arg(long, global = true)]
    feature_stride: Option<usize>,
    #[arg(long, global = true)]
    depth_noise: Option<f64>,
    #[arg(long, global = true)]
    no_self_attention: bool,
    #[arg(long, global = true)]
    no_cross_attention: bool,
    #[arg(long, global = true)]
    no_affinity: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Stage1,
    Oracle,
    RawDepth,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write a checkpoint plus loss log.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint for occupancy proposals (stage 2 only).
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Continue from `--out` if it exists.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write predicted label grids and proposal masks.
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
    },
    /// Write per-scene and aggregate metric reports.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        bypass: bool,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Seeds per operation, starting at `--seed`.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            frames: self.frames,
            ranges: self.ranges.clone(),
            query_mode: self.query_mode,
            occupancy_source: self.occupancy_source.map(|s| match s {
                Source::Stage1 => OccupancySource::Stage1,
                Source::Oracle => OccupancySource::Oracle,
                Source::RawDepth => OccupancySource::RawDepth,
            }),
            feature_stride: self.feature_stride,
            depth_noise: self.depth_noise,
            no_self_attention: self.no_self_attention,
            no_cross_attention: self.no_cross_attention,
            no_affinity: self.no_affinity,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Gradcheck { seeds } = cli.command {
        let checks = cmd_gradcheck(cli.global.seed.unwrap_or(0), seeds);
        print!("{}", gradcheck_text(&checks));
        let failed = checks.iter().filter(|c| !c.passed()).count();
        println!("checks={} failed={failed}", checks.len());
        return match failed {
            0 => Ok(()),
            n => Err(SscError::NonFinite(format!("{n} gradient checks above tolerance"))),
        };
    }
    let cfg = load_config(cli.global.config.as_deref(), &cli.global.overrides())?;
    match cli.command {
        Command::Synth { count, out } => {
            let m = cmd_synth(&cfg, count, &out)?;
            println!("scenes={} manifest={}", m.scenes.len(), out.join(ssc_core::dataset::MANIFEST).display());
        }
        Command::Train {
            stage,
            dataset,
            out,
            stage1,
            resume,
            steps,
            log,
        } => {
            let opts = TrainOptions {
                stage1,
                resume,
                steps,
                log,
            };
            let s = cmd_train(stage, &cfg, &dataset, &out, &opts)?;
            let loss = s.last_loss.map_or("none".to_string(), |l| format!("{l:e}"));
            println!(
                "stage={} steps={} last_loss={loss} checkpoint={} log={}",
                s.stage,
                s.steps,
                s.checkpoint.display(),
                s.log.display()
            );
        }
        Command::Infer {
            dataset,
            out,
            stage1,
            stage2,
        } => {
            let preds = cmd_infer(&cfg, &ModelPaths { stage1, stage2 }, &dataset, &out)?;
            println!("scenes={} out={}", preds.len(), out.display());
        }
        Command::Eval {
            dataset,
            out,
            stage1,
            stage2,
            bypass,
        } => {
            let s = cmd_eval(&cfg, &ModelPaths { stage1, stage2 }, &dataset, &out, bypass)?;
            print!("{}", s.aggregate.to_text());
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
