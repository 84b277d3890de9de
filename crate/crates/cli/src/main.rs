//! `voxdiff`: synthetic corpus, body-part regressor, diffusion pretraining,
//! feature extraction, probing and Dice reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{set_key, ExperimentConfig};

const AFTER_HELP: &str = "\
Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric failure (NaN), 1 other.

The output root is `output` from the config, replaced by $VOXDIFF_OUTPUT_ROOT when set,
replaced in turn by --set output=...

Layout under the output root:
  corpus/{train,test,test_b}/   volumes + manifest.json (test_b: shifted distribution B)
  bpr/bpr.ckpt, bpr/loss.csv
  ddpm/final.ckpt, ddpm/step_NNNNNN.ckpt, ddpm/loss.csv
  features/                     feature cache, extract.csv
  probe/<tag>.ckpt, probe/<tag>_loss.csv          tag = ddpm | random
  reports/<tag>.md, reports/<tag>.csv, reports/<tag>_ablation.csv
Every command writes <command>.resolved.toml next to its outputs.

CSV schemas:
  bpr/loss.csv              step,loss
  ddpm/loss.csv             step,loss,wall_ms
  probe/<tag>_loss.csv      step,loss
  features/extract.csv      split,index,channels,z,y,x
  reports/<tag>.csv         model,class,group,dice        (model = <tag>/A or <tag>/B)
  reports/<tag>_ablation.csv  t,Small,Medium,Big,Avg      (one row per timestep)";

#[derive(Parser)]
#[command(name = "voxdiff", version, about = "Diffusion-pretrained 3D features and frozen-feature probing", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML sections: seed, output, synth, bpr, pretrain, extract, probe, ablate, inputs).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pretrain.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct ModelInputs {
    /// Denoiser checkpoint [default: <output>/ddpm/final.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Body-part regressor checkpoint; required for conditioned denoisers.
    #[arg(long)]
    bpr: Option<PathBuf>,
    /// Use an untrained denoiser with the checkpoint's architecture and seed.
    #[arg(long)]
    random_init: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training corpus (A) and held-out sets for distributions A and B.
    Synth(Common),
    /// Train the body-part regressor on the training corpus.
    TrainBpr(Common),
    /// Pretrain the diffusion denoiser on the training corpus.
    TrainDdpm {
        #[command(flatten)]
        common: Common,
        /// Body-part regressor checkpoint (conditioned pretraining).
        #[arg(long)]
        bpr: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract and cache features for the probe subset and both held-out sets.
    Extract {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelInputs,
    },
    /// Train a probe on frozen features of the labelled training subset.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelInputs,
    },
    /// Evaluate a probe on distributions A and B and write Dice reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelInputs,
        /// Probe checkpoint [default: <output>/probe/<tag>.ckpt].
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Single-timestep probes over `ablate.fractions` of the schedule.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelInputs,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn missing(message: String) -> Self {
        Self { code: 3, message }
    }
}

impl From<voxdiff_core::Error> for CliError {
    fn from(e: voxdiff_core::Error) -> Self {
        use voxdiff_core::Error as E;
        let code = match &e {
            E::Config(_) | E::Checkpoint(_) => 2,
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            E::NonFinite(_) => 4,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

fn resolve(common: &Common, flags: Vec<(&str, toml::Value)>) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::resolve_with(common.config.as_deref(), &common.overrides, |t| {
        for (k, v) in flags {
            set_key(t, k, v)?;
        }
        Ok(())
    })
}

fn model_flags(m: &ModelInputs) -> Vec<(&'static str, toml::Value)> {
    let mut f = Vec::new();
    if let Some(p) = &m.checkpoint {
        f.push(("inputs.checkpoint", path_value(p)));
    }
    if let Some(p) = &m.bpr {
        f.push(("inputs.bpr", path_value(p)));
    }
    if m.random_init {
        f.push(("inputs.random_init", toml::Value::Boolean(true)));
    }
    f
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => commands::synth(&resolve(&c, vec![])?),
        Command::TrainBpr(c) => commands::train_bpr(&resolve(&c, vec![])?),
        Command::TrainDdpm { common, bpr, resume } => {
            let mut f = Vec::new();
            if let Some(p) = &bpr {
                f.push(("inputs.bpr", path_value(p)));
            }
            if let Some(p) = &resume {
                f.push(("inputs.resume", path_value(p)));
            }
            commands::train_ddpm(&resolve(&common, f)?)
        }
        Command::Extract { common, model } => commands::extract(&resolve(&common, model_flags(&model))?),
        Command::Probe { common, model } => commands::probe(&resolve(&common, model_flags(&model))?),
        Command::Eval { common, model, probe } => {
            let mut f = model_flags(&model);
            if let Some(p) = &probe {
                f.push(("inputs.probe", path_value(p)));
            }
            commands::eval(&resolve(&common, f)?)
        }
        Command::Ablate { common, model } => commands::ablate(&resolve(&common, model_flags(&model))?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
