//! Command-line driver: one subcommand per pipeline step, plus `pipeline`
//! which chains them on a phantom dataset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kitseg::config::{RunConfig, SeedConfig};
use kitseg::phantom::make_dataset;
use kitseg::pipeline::{
    preprocessed_ids, run_evaluate, run_pipeline, run_postprocess, run_predict, run_preprocess, run_train, split_cases,
};
use kitseg::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "kitseg", version, about = "Kidney and tumor segmentation with a multi-scale supervised 3D U-Net")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Start from the desk-scale preset instead of the full-size defaults.
    #[arg(long, global = true)]
    toy: bool,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// Number of cases (overrides phantom.num_cases).
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Normalize and resample a case directory.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a preprocessed directory using the configured split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict label volumes on the original grid.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Preprocessed case directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Case ids to predict (default: all).
        #[arg(long, value_delimiter = ',')]
        cases: Vec<String>,
    },
    /// Apply connected-component rules to predictions.
    Postprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth and render the report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Case directory with segmentation files.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log for the loss curve.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Phantom data, preprocessing, training, prediction, post-processing and evaluation.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    if common.device != "cpu" {
        return Err(Error::Config(vec![format!("device `{}` is not available; only `cpu` is supported", common.device)]));
    }
    let base = if common.toy { RunConfig::toy() } else { RunConfig::default() };
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, &base)?,
        None => base,
    };
    if let Some(seed) = common.seed {
        cfg.seeds = SeedConfig::all(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Phantom { out, cases } => {
            if let Some(n) = cases {
                cfg.phantom.num_cases = n;
                cfg.validate()?;
            }
            let manifest = make_dataset(&out, &cfg.phantom, cfg.seeds.phantom)?;
            cfg.write_snapshot(&out)?;
            println!("wrote {} cases to {}", manifest.cases.len(), out.display());
        }
        Command::Preprocess { data, out } => {
            let stats = run_preprocess(&cfg, &data, &out, None)?;
            println!("dataset stats: {}", serde_json::to_string(&stats)?);
        }
        Command::Train { data, out } => {
            let split = split_cases(&preprocessed_ids(&data)?, &cfg)?;
            let report = run_train(&cfg, &data, &out, &split)?;
            println!(
                "trained {} epochs ({:?}); best epoch {} -> {}",
                report.history.len(),
                report.stop,
                report.best_epoch,
                out.join("best.ckpt").display()
            );
        }
        Command::Predict { checkpoint, data, out, cases } => {
            let ids = if cases.is_empty() { preprocessed_ids(&data)? } else { cases };
            run_predict(&cfg, &checkpoint, &data, &ids, &out)?;
            println!("wrote {} predictions to {}", ids.len(), out.display());
        }
        Command::Postprocess { data, out } => {
            run_postprocess(&cfg, &data, &out)?;
            println!("wrote post-processed predictions to {}", out.display());
        }
        Command::Evaluate { pred, gt, out, log } => {
            cfg.write_snapshot(&out)?;
            let eval = run_evaluate(&pred, &gt, None, &out, log.as_deref())?;
            print_summary(&eval.summary, &out);
        }
        Command::Pipeline { out } => {
            let report = run_pipeline(&cfg, &out)?;
            print_summary(&report.evaluation.summary, &out.join("report"));
        }
    }
    Ok(())
}

fn print_summary(summary: &[kitseg::evalreport::MetricSummary], dir: &Path) {
    for s in summary {
        println!("{:<24} mean {:.4}  median {:.4}  (n = {})", s.metric, s.mean, s.median, s.n);
    }
    println!("report written to {}", dir.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
