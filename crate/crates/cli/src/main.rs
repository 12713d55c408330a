use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ovformer::config::ExperimentConfig;
use ovformer::experiment::{self, SweepAxis};
use ovformer::Error;

#[derive(Parser)]
#[command(name = "ovformer", version, about = "Open-vocabulary video instance segmentation on synthetic worlds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML (or .json) config layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds both the dataset and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to `output_dir` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into OUT/dataset.
    GenData,
    /// Train and write OUT/checkpoint and OUT/train_log.csv.
    Train,
    /// Run inference with OUT/checkpoint; one JSON per video in OUT/results.
    Infer {
        /// Comma-separated video ids; all eval videos by default.
        #[arg(long, value_delimiter = ',')]
        videos: Option<Vec<usize>>,
    },
    /// Evaluate OUT/results into OUT/eval_report.{json,csv}.
    Eval,
    /// Train/infer/evaluate once per value of one axis.
    Sweep {
        /// uea_enabled, clip_len or scheme.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; a per-axis default list otherwise.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Hungarian oracle, gradient checks and evaluator fixtures.
    Selftest,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numeric() => 3,
        Error::Fixture(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> ovformer::Result<()> {
    if let Command::Selftest = cli.command {
        for c in experiment::selftest()? {
            println!("{} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
        return Ok(());
    }
    let mut cfg = ExperimentConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if let Some(seed) = cli.common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.common.out {
        cfg.output_dir = out.display().to_string();
    }
    let out = PathBuf::from(&cfg.output_dir);
    match cli.command {
        Command::GenData => {
            let w = experiment::gen_data(&cfg, &out)?;
            println!("generated {} videos in {}", w.videos.len(), out.join(experiment::DATASET_DIR).display());
        }
        Command::Train => {
            let (_, log) = experiment::run_train(&cfg, &out)?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!("trained {} steps: loss {:.6} -> {:.6}", log.len(), first.loss, last.loss);
            } else {
                println!("trained 0 steps");
            }
        }
        Command::Infer { videos } => {
            let results = experiment::run_infer(&cfg, &out, videos.as_deref())?;
            let tracks: usize = results.iter().map(|r| r.tracks.len()).sum();
            println!("{} videos, {tracks} tracks -> {}", results.len(), out.join(experiment::RESULTS_DIR).display());
        }
        Command::Eval => {
            let r = experiment::run_eval(&cfg, &out)?;
            let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "mAP {:.4}  mAP_b {}  mAP_n {}  id_switches {}  id_consistency {:.4}",
                r.map,
                opt(r.map_base),
                opt(r.map_novel),
                r.id_switches,
                r.id_consistency
            );
        }
        Command::Sweep { axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let values = values.unwrap_or_else(|| axis.default_values());
            for r in experiment::sweep(&cfg, axis, &values, &out)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Selftest => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
