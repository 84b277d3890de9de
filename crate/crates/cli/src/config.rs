//! Sectioned `key = value` experiment config (TOML syntax). Unknown keys are
//! rejected; command-line overrides are applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxdiff_core::bpr::BprConfig;
use voxdiff_core::nn::AdamConfig;
use voxdiff_core::pretrain::PretrainConfig;
use voxdiff_core::probing::ProbeConfig;
use voxdiff_core::ScheduleParams;

use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "VOXDIFF_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub synth: SynthSection,
    pub bpr: BprSection,
    pub pretrain: PretrainSection,
    pub extract: ExtractSection,
    pub probe: ProbeSection,
    pub ablate: AblateSection,
    pub inputs: InputsSection,
}

/// Upstream artifacts. Unset paths default to the standard locations under
/// the output root; command-line flags land here too, so the snapshot is
/// enough to rerun a command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpr: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Use an untrained denoiser with the checkpoint's architecture and seed.
    pub random_init: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BprSection {
    pub steps: usize,
    pub channels: [usize; 4],
    pub slices: usize,
    pub min_gap: usize,
    pub max_gap: usize,
    pub max_shift: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub patch: [usize; 3],
    pub width: usize,
    pub levels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub conditioned: bool,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub timesteps: Vec<usize>,
    /// Pyramid levels; empty means all.
    pub levels: Vec<usize>,
    pub overlap: f64,
    pub noise_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub crop: [usize; 3],
    /// Labelled training volumes used by the probe (a prefix of the training corpus).
    pub train_volumes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Timesteps as fractions of the schedule length.
    pub fractions: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            synth: SynthSection::default(),
            bpr: BprSection::default(),
            pretrain: PretrainSection::default(),
            extract: ExtractSection::default(),
            probe: ProbeSection::default(),
            ablate: AblateSection::default(),
            inputs: InputsSection::default(),
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { train: 200, test: 50 }
    }
}

impl Default for BprSection {
    fn default() -> Self {
        let b = BprConfig::default();
        Self {
            steps: 5000,
            channels: b.channels,
            slices: b.slices_per_sample,
            min_gap: b.min_gap,
            max_gap: b.max_gap,
            max_shift: b.max_shift,
            learning_rate: b.learning_rate,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::desk();
        Self {
            patch: p.patch_shape,
            width: p.base_width,
            levels: p.levels,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.adam.learning_rate,
            beta1: p.adam.beta1,
            beta2: p.adam.beta2,
            eps: p.adam.eps,
            steps: p.schedule.steps,
            beta_min: p.schedule.beta_min,
            beta_max: p.schedule.beta_max,
            conditioned: p.conditioned,
            checkpoint_every: p.checkpoint_every,
        }
    }
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self { timesteps: vec![10], levels: Vec::new(), overlap: 0.5, noise_samples: 1 }
    }
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self { hidden: p.hidden, steps: p.steps, learning_rate: p.learning_rate, crop: p.crop, train_volumes: 50 }
    }
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { fractions: vec![0.01, 0.1, 0.3, 0.6] }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::config(msg.into())
}

/// Sets `a.b.c = value` in `table`, parsing `value` as a TOML literal and
/// falling back to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override {assignment:?} is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    set_key(table, key, value)
}

pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override key {key}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// File (optional) + output-root env var + `--set` overrides, validated.
    #[cfg(test)]
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        Self::resolve_with(path, overrides, |_| Ok(()))
    }

    /// Config file, then output-root env var, then `--set` overrides, then `flags`.
    pub fn resolve_with(
        path: Option<&Path>,
        overrides: &[String],
        flags: impl FnOnce(&mut toml::Table) -> Result<(), CliError>,
    ) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::missing(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            table.insert("output".into(), toml::Value::String(root));
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        flags(&mut table)?;
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pretrain_config().validate().map_err(|e| config_error(format!("[pretrain] {e}")))?;
        if self.synth.train < 2 || self.synth.test == 0 {
            return Err(config_error("[synth] needs train >= 2 and test >= 1"));
        }
        if self.probe.train_volumes == 0 {
            return Err(config_error("[probe] train_volumes must be at least 1"));
        }
        if self.extract.timesteps.is_empty() {
            return Err(config_error("[extract] timesteps must not be empty"));
        }
        if let Some(f) = self.ablate.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(config_error(format!("[ablate] fraction {f} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn bpr_config(&self) -> BprConfig {
        BprConfig {
            channels: self.bpr.channels,
            slices_per_sample: self.bpr.slices,
            min_gap: self.bpr.min_gap,
            max_gap: self.bpr.max_gap,
            max_shift: self.bpr.max_shift,
            steps: self.bpr.steps,
            learning_rate: self.bpr.learning_rate,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            patch_shape: p.patch,
            base_width: p.width,
            levels: p.levels,
            epochs: p.epochs,
            batch_size: p.batch_size,
            adam: AdamConfig { learning_rate: p.learning_rate, beta1: p.beta1, beta2: p.beta2, eps: p.eps },
            schedule: ScheduleParams { steps: p.steps, beta_min: p.beta_min, beta_max: p.beta_max },
            conditioned: p.conditioned,
            seed: self.seed,
            checkpoint_every: p.checkpoint_every,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            hidden: self.probe.hidden,
            steps: self.probe.steps,
            learning_rate: self.probe.learning_rate,
            crop: self.probe.crop,
            seed: self.seed,
            ..ProbeConfig::default()
        }
    }
}
