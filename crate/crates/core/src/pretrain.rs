//! Diffusion pretraining over random patches, with optional coordinate
//! conditioning, loss logging and resumable checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpr::{coordinate_map, BprModel};
use crate::checkpoint::{denoiser_checkpoint, load_denoiser, Checkpoint};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{ddpm_loss, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::volumes::{copy_region, Volume, VolumeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Patch extent `(z, y, x)`.
    pub patch_shape: [usize; 3],
    pub base_width: usize,
    pub levels: usize,
    /// One epoch draws one random patch per training volume.
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: ScheduleParams,
    pub conditioned: bool,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl PretrainConfig {
    /// Laptop-sized defaults, with a patch that fits the default phantom.
    pub fn desk() -> Self {
        Self {
            patch_shape: [16, 16, 16],
            base_width: 16,
            levels: 3,
            epochs: 10,
            batch_size: 1,
            adam: AdamConfig::default(),
            schedule: ScheduleParams::rescaled(100),
            conditioned: false,
            seed: 0,
            checkpoint_every: 500,
        }
    }

    /// Full-size reference setting.
    pub fn full_scale() -> Self {
        Self {
            patch_shape: [32, 128, 128],
            base_width: 32,
            levels: 4,
            epochs: 3000,
            schedule: ScheduleParams::default(),
            checkpoint_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn model_config(&self) -> DenoiserConfig {
        DenoiserConfig::new(self.base_width, self.levels, self.conditioned)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.epochs * dataset_len
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.adam.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        let model = self.model_config();
        model.validate()?;
        model.check_patch(self.patch_shape)?;
        NoiseSchedule::from_params(self.schedule)?;
        Ok(())
    }

    /// Fields that must agree for a resumed run to continue the same trajectory.
    fn check_resumable(&self, other: &Self) -> Result<()> {
        let mut diffs = Vec::new();
        macro_rules! same {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    diffs.push(stringify!($f));
                }
            )*};
        }
        same!(patch_shape, base_width, levels, batch_size, adam, schedule, conditioned, seed);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("config mismatch with checkpoint: {}", diffs.join(", "))))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    step: usize,
    adam_step: u64,
    rng: ChaCha8Rng,
}

pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    /// Losses of the steps run by this call.
    pub losses: Vec<f32>,
    pub step: usize,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

struct Trainer<'a> {
    config: PretrainConfig,
    model: Denoiser<f32>,
    sched: NoiseSchedule,
    opt: Adam<f32>,
    rng: ChaCha8Rng,
    step: usize,
    dataset: &'a [Volume],
    coords: Vec<Option<Volume>>,
    bpr: Option<&'a BprModel>,
}

fn check_dataset(dataset: &[Volume], config: &PretrainConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Invalid("pretraining dataset is empty".into()));
    }
    for (i, v) in dataset.iter().enumerate() {
        if v.kind() != VolumeKind::Image || !v.is_normalized() {
            return Err(Error::Invalid(format!("volume {i} is not a normalized image")));
        }
        if (0..3).any(|a| v.shape()[a] < config.patch_shape[a]) {
            return Err(Error::Shape(format!(
                "volume {i} of shape {:?} is smaller than patch_shape {:?}",
                v.shape(),
                config.patch_shape
            )));
        }
    }
    Ok(())
}

fn check_conditioning(config: &PretrainConfig, bpr: Option<&BprModel>) -> Result<()> {
    match (config.conditioned, bpr.is_some()) {
        (true, false) => Err(Error::Config("conditioned pretraining needs a body-part regressor".into())),
        (false, true) => Err(Error::Config("a body-part regressor was given but conditioning is off".into())),
        _ => Ok(()),
    }
}

/// Permutation of volume indices for `epoch`, derived from the seed only.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

impl<'a> Trainer<'a> {
    fn fresh(config: &PretrainConfig, dataset: &'a [Volume], bpr: Option<&'a BprModel>) -> Result<Self> {
        config.validate()?;
        check_conditioning(config, bpr)?;
        check_dataset(dataset, config)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Denoiser::new(config.model_config(), &mut init_rng)?;
        let opt = Adam::new(config.adam, model.params());
        Ok(Self {
            config: config.clone(),
            model,
            sched: NoiseSchedule::from_params(config.schedule)?,
            opt,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            step: 0,
            dataset,
            coords: vec![None; dataset.len()],
            bpr,
        })
    }

    fn restore(ck: &Checkpoint, config: &PretrainConfig, dataset: &'a [Volume], bpr: Option<&'a BprModel>) -> Result<Self> {
        let saved: PretrainConfig = serde_json::from_value(ck.config.get("training").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: bad training config: {e}")))?;
        config.check_resumable(&saved)?;
        let mut t = Self::fresh(config, dataset, bpr)?;
        let (model, sched) = load_denoiser(ck)?;
        let state: TrainState = serde_json::from_value(ck.state.clone())
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: bad training state: {e}")))?;
        t.opt.m.load_from(ck.section("adam.m."))?;
        t.opt.v.load_from(ck.section("adam.v."))?;
        t.opt.step = state.adam_step;
        t.model = model;
        t.sched = sched;
        t.step = state.step;
        t.rng = state.rng;
        Ok(t)
    }

    fn checkpoint(&self) -> Checkpoint {
        let state = TrainState { step: self.step, adam_step: self.opt.step, rng: self.rng.clone() };
        let mut ck = denoiser_checkpoint(
            &self.model,
            &self.sched,
            serde_json::to_value(&self.config).expect("config serialises"),
            serde_json::to_value(state).expect("state serialises"),
        );
        ck.insert_section("adam.m.", &self.opt.m);
        ck.insert_section("adam.v.", &self.opt.v);
        ck
    }

    fn coord(&mut self, i: usize) -> Result<&Volume> {
        if self.coords[i].is_none() {
            let bpr = self.bpr.expect("conditioning checked");
            self.coords[i] = Some(coordinate_map(bpr, &self.dataset[i])?);
        }
        Ok(self.coords[i].as_ref().expect("just filled"))
    }

    fn train_step(&mut self) -> Result<f32> {
        let n = self.dataset.len();
        let epoch = self.step / n;
        let order = epoch_order(self.config.seed, epoch, n);
        let mut total = 0.0;
        let mut grads = None;
        for b in 0..self.config.batch_size {
            let vi = order[(self.step % n + b) % n];
            let v = &self.dataset[vi];
            let shape = v.shape();
            let p = self.config.patch_shape;
            let origin: [usize; 3] = std::array::from_fn(|a| self.rng.gen_range(0..=shape[a] - p[a]));
            let x0 = crate::tensor::Tensor::new(vec![1, p[0], p[1], p[2]], copy_region(v.data(), 1, shape, origin, p));
            let cond = if self.config.conditioned {
                let c = self.coord(vi)?;
                Some(crate::tensor::Tensor::new(vec![1, p[0], p[1], p[2]], copy_region(c.data(), 1, shape, origin, p)))
            } else {
                None
            };
            let t = self.rng.gen_range(1..=self.sched.steps());
            let out = ddpm_loss(&self.model, &x0, t, cond.as_ref(), &self.sched, &mut self.rng)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} at step {} (volume {vi}, origin {origin:?}, t={t})",
                    out.loss,
                    self.step + 1
                )));
            }
            total += out.loss;
            match grads.as_mut() {
                None => grads = Some(out.grads),
                Some(g) => crate::nn::ParamSet::add_scaled(g, &out.grads, 1.0),
            }
        }
        let mut grads = grads.expect("batch_size >= 1");
        let bs = self.config.batch_size as f32;
        if self.config.batch_size > 1 {
            grads.scale(1.0 / bs);
        }
        self.opt.update(self.model.params_mut(), &grads);
        self.step += 1;
        Ok(total / bs)
    }

    /// Runs until `until` (or the configured total), logging and checkpointing into `out`.
    fn run(&mut self, out: &Path, until: usize) -> Result<PretrainOutcome> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let total = self.config.total_steps(self.dataset.len());
        let until = until.min(total);
        let csv_path = out.join(LOSS_CSV);
        let fresh_log = self.step == 0 || !csv_path.exists();
        let mut csv = OpenOptions::new()
            .create(true)
            .append(!fresh_log)
            .write(true)
            .truncate(fresh_log)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?;
        if fresh_log {
            writeln!(csv, "step,loss,wall_ms").map_err(|e| Error::io(&csv_path, e))?;
        }
        let start = Instant::now();
        let mut losses = Vec::new();
        while self.step < until {
            let loss = self.train_step()?;
            losses.push(loss);
            writeln!(csv, "{},{},{}", self.step, loss, start.elapsed().as_millis()).map_err(|e| Error::io(&csv_path, e))?;
            if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) && self.step < total {
                self.checkpoint().save(out.join(format!("step_{:06}.ckpt", self.step)))?;
            }
        }
        let name = if self.step >= total { FINAL_CHECKPOINT.to_string() } else { format!("step_{:06}.ckpt", self.step) };
        let path = out.join(name);
        self.checkpoint().save(&path)?;
        let timing = serde_json::json!({ "step": self.step, "wall_ms": start.elapsed().as_millis() as u64 });
        let sidecar = path.with_extension("timing.json");
        fs::write(&sidecar, timing.to_string() + "\n").map_err(|e| Error::io(&sidecar, e))?;
        Ok(PretrainOutcome { checkpoint: path, losses, step: self.step })
    }
}

/// Trains a denoiser for the configured number of epochs.
pub fn train_ddpm(dataset: &[Volume], config: &PretrainConfig, bpr: Option<&BprModel>, out: &Path) -> Result<PretrainOutcome> {
    train_ddpm_steps(dataset, config, bpr, out, usize::MAX)
}

/// Like [`train_ddpm`] but stops after `max_steps`, leaving a resumable checkpoint.
pub fn train_ddpm_steps(
    dataset: &[Volume],
    config: &PretrainConfig,
    bpr: Option<&BprModel>,
    out: &Path,
    max_steps: usize,
) -> Result<PretrainOutcome> {
    Trainer::fresh(config, dataset, bpr)?.run(out, max_steps)
}

/// Continues training from `checkpoint` up to the configured total. Only
/// `epochs` and `checkpoint_every` may differ from the checkpointed config.
/// Returns the input checkpoint untouched when training is already complete.
pub fn resume(
    checkpoint: &Path,
    dataset: &[Volume],
    config: &PretrainConfig,
    bpr: Option<&BprModel>,
    out: &Path,
) -> Result<PretrainOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut t = Trainer::restore(&ck, config, dataset, bpr)?;
    if t.step >= config.total_steps(dataset.len()) {
        return Ok(PretrainOutcome { checkpoint: checkpoint.to_path_buf(), losses: Vec::new(), step: t.step });
    }
    t.run(out, usize::MAX)
}

/// Training config stored in a denoiser checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<PretrainConfig> {
    serde_json::from_value(ck.config.get("training").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("checkpoint has no training config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PretrainConfig {
        PretrainConfig {
            patch_shape: [8, 8, 8],
            base_width: 4,
            levels: 2,
            epochs: 10,
            adam: AdamConfig { learning_rate: 1e-3, ..Default::default() },
            checkpoint_every: 0,
            ..PretrainConfig::desk()
        }
    }

    fn constant_volumes(n: usize) -> Vec<Volume> {
        (0..n).map(|i| Volume::filled([10, 10, 10], [1.0; 3], 0.5 - 0.1 * i as f32, VolumeKind::Image).unwrap()).collect()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.patch_shape = [8, 8, 7];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.adam.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.epochs = 0;
        assert!(c.validate().is_err());
        assert!(PretrainConfig::desk().validate().is_ok());
        assert!(PretrainConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn conditioning_must_match_regressor() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config();
        c.conditioned = true;
        let err = train_ddpm(&constant_volumes(2), &c, None, dir.path()).err().unwrap();
        assert!(err.to_string().contains("regressor"));
    }

    #[test]
    fn same_seed_same_trace_and_csv_layout() {
        let data = constant_volumes(4);
        let c = PretrainConfig { epochs: 2, ..tiny_config() };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = train_ddpm(&data, &c, None, d1.path()).unwrap();
        let b = train_ddpm(&data, &c, None, d2.path()).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 8);
        assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
        let csv = fs::read_to_string(d1.path().join(LOSS_CSV)).unwrap();
        assert_eq!(csv.lines().next(), Some("step,loss,wall_ms"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = constant_volumes(3);
        let c = PretrainConfig { epochs: 4, batch_size: 2, ..tiny_config() };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let full = train_ddpm(&data, &c, None, d1.path()).unwrap();
        let half = train_ddpm_steps(&data, &c, None, d2.path(), 5).unwrap();
        assert_eq!(half.step, 5);
        let rest = resume(&half.checkpoint, &data, &c, None, d2.path()).unwrap();
        let joined: Vec<f32> = half.losses.iter().chain(&rest.losses).copied().collect();
        assert_eq!(joined.len(), full.losses.len());
        for (a, b) in joined.iter().zip(&full.losses) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        assert_eq!(fs::read(&rest.checkpoint).unwrap(), fs::read(&full.checkpoint).unwrap());
        let again = resume(&rest.checkpoint, &data, &c, None, d2.path()).unwrap();
        assert_eq!(again.checkpoint, rest.checkpoint);
        assert!(again.losses.is_empty());
        let mut other = c.clone();
        other.patch_shape = [8, 8, 4];
        let err = resume(&half.checkpoint, &data, &other, None, d2.path()).err().unwrap();
        assert!(err.to_string().contains("patch_shape"), "{err}");
    }

    #[test]
    fn nan_inputs_are_rejected_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new([8, 8, 8], [1.0; 3], vec![2.0; 512], VolumeKind::Image).unwrap();
        assert!(train_ddpm(&[v], &tiny_config(), None, dir.path()).is_err());
    }
}
