use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use petmc::config::PipelineConfig;
use petmc::error::{Error, Result};
use petmc::pipeline::{self, CHECKPOINT_FILE, SERIES_FILE};

#[derive(Parser, Debug)]
#[command(name = "petmc", version, about = "Motion correction and Patlak analysis of dynamic PET series")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; keys left out keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Set every seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the training step cap.
    #[arg(long, global = true)]
    max_steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the phantom series and its ground-truth bundle.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a series; writes a checkpoint and the loss trace.
    Train {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correct a series with a checkpoint; writes the series and its fields.
    Correct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelwise Patlak fit; writes Ki, Vb, NFE and the degenerate mask.
    Fit {
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of motion-free, moved and corrected series, ROI tables and slice images.
    Evaluate {
        /// Output directory of `simulate`.
        #[arg(long)]
        sim: PathBuf,
        /// Output directory of `correct`.
        #[arg(long)]
        corrected: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated AUC and mean ROC of ROI tables given as NAME=PATH.
    Classify {
        #[arg(long = "rois", value_parser = parse_method, required = true)]
        rois: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per configured smoothness weight.
    SweepLambda {
        #[arg(long)]
        sim: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the network gradients.
    Gradcheck {
        #[arg(long)]
        out: PathBuf,
    },
    /// simulate, train, correct, fit, evaluate and classify in one go.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

fn resolve(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            PipelineConfig::from_toml_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(steps) = common.max_steps {
        cfg.train.max_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Simulate { out } => {
            let sim = pipeline::simulate(&cfg, &out)?;
            println!("frames={} series={}", sim.moved.len(), show(&out.join(SERIES_FILE)));
        }
        Command::Train { series, out } => {
            let (_, rows) = pipeline::train(&cfg, &series, &out)?;
            let last = rows.last().map_or(f64::NAN, |r| r.total);
            println!("steps={} final_loss={last} checkpoint={}", rows.len(), show(&out.join(CHECKPOINT_FILE)));
        }
        Command::Correct { checkpoint, series, out } => {
            let c = pipeline::correct(&cfg, &checkpoint, &series, &out)?;
            println!("frames={} series={}", c.corrected.len(), show(&out.join(SERIES_FILE)));
        }
        Command::Fit { series, out } => {
            let (_, s) = pipeline::fit(&cfg, &series, &out)?;
            println!("mean_nfe={} max_nfe={} degenerate={}", s.mean_nfe, s.max_nfe, s.degenerate);
        }
        Command::Evaluate { sim, corrected, out } => {
            let ev = pipeline::evaluate(&cfg, &sim, &corrected, &out)?;
            let c = &ev.report.conditions;
            for (name, m) in [("motion_free", &c.motion_free), ("motion", &c.motion), ("corrected", &c.corrected)] {
                println!(
                    "{name} mean_nfe={} ki_vb_nmi={} ki_vb_ncc={} tumor_ki_mean={} tumor_ki_max={}",
                    m.mean_nfe, m.ki_vb_nmi, m.ki_vb_ncc, m.tumor_ki_mean, m.tumor_ki_max
                );
            }
        }
        Command::Classify { rois, out } => {
            for s in pipeline::classify(&cfg, &rois, &out)? {
                println!("{} mean_auc={} std_auc={}", s.method, s.mean_auc, s.std_auc);
            }
        }
        Command::SweepLambda { sim, out } => {
            for r in pipeline::sweep_lambda(&cfg, &sim, &out)? {
                println!("lambda={} mean_nfe={} ki_vb_ncc={}", r.lambda, r.mean_nfe, r.ki_vb_ncc);
            }
        }
        Command::Gradcheck { out } => {
            let r = pipeline::gradcheck(&cfg, &out)?;
            println!("max_rel_error={} checked={}", r.max_rel_error, r.checked);
        }
        Command::Run { out } => {
            let s = pipeline::run_pipeline(&cfg, &out)?;
            let c = &s.metrics.conditions;
            println!(
                "mean_nfe motion_free={} motion={} corrected={}",
                c.motion_free.mean_nfe, c.motion.mean_nfe, c.corrected.mean_nfe
            );
            for m in &s.classification {
                println!("{} mean_auc={}", m.method, m.mean_auc);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
