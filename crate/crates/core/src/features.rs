//! Voxel-wise features from a frozen denoiser: noise every patch at the
//! chosen timesteps, collect the decoder pyramid, upsample, concatenate and
//! fuse overlapping patches by mean.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpr::{coordinate_map, BprModel};
use crate::checkpoint::{bytes_hash, load_denoiser, Checkpoint};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{gaussian_like, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volumes::{copy_region, encode_volume, fuse_patches, plan_patch_grid, upsample_trilinear, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPlan {
    /// Pyramid levels to keep, ascending (0 = full resolution).
    pub levels: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub patch_shape: [usize; 3],
    pub overlap: f64,
    pub seed: u64,
    /// Noise draws averaged per (patch, timestep).
    pub noise_samples: usize,
}

impl ExtractionPlan {
    pub fn new(config: &DenoiserConfig, patch_shape: [usize; 3], timesteps: Vec<usize>, seed: u64) -> Self {
        Self {
            levels: (0..config.levels).collect(),
            timesteps,
            patch_shape,
            overlap: 0.5,
            seed,
            noise_samples: 1,
        }
    }

    pub fn channels(&self, config: &DenoiserConfig) -> usize {
        self.levels.iter().map(|&l| config.width(l)).sum::<usize>() * self.timesteps.len()
    }
}

/// Validated, sorted, de-duplicated level subset.
pub fn select_levels(config: &DenoiserConfig, which: &[usize]) -> Result<Vec<usize>> {
    if which.is_empty() {
        return Err(Error::Invalid("level subset is empty".into()));
    }
    if let Some(&bad) = which.iter().find(|&&l| l >= config.levels) {
        return Err(Error::Invalid(format!("unknown level {bad}: model has levels 0..{}", config.levels)));
    }
    let mut v = which.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

/// Timestep for a fraction of a `steps`-long schedule, clamped to `1..=steps`.
pub fn fraction_to_timestep(fraction: f64, steps: usize) -> usize {
    ((fraction * steps as f64).round() as usize).clamp(1, steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    /// `[C, Z, Y, X]` on the source volume grid.
    pub data: Tensor<f32>,
    pub plan: ExtractionPlan,
}

impl FeatureVolume {
    pub fn channels(&self) -> usize {
        self.data.channels()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.spatial()
    }

    /// Keeps the channel blocks of the timestep positions in `which`.
    pub fn timestep_subset(&self, which: &[usize]) -> Result<FeatureVolume> {
        let per_t = self.channels() / self.plan.timesteps.len();
        let plane: usize = self.shape().iter().product();
        let mut data = Vec::with_capacity(which.len() * per_t * plane);
        let mut ts = Vec::new();
        for &i in which {
            let t = *self.plan.timesteps.get(i).ok_or_else(|| Error::Invalid(format!("no timestep at position {i}")))?;
            ts.push(t);
            data.extend_from_slice(&self.data.data()[i * per_t * plane..(i + 1) * per_t * plane]);
        }
        let [z, y, x] = self.shape();
        Ok(FeatureVolume {
            data: Tensor::new(vec![which.len() * per_t, z, y, x], data),
            plan: ExtractionPlan { timesteps: ts, ..self.plan.clone() },
        })
    }
}

/// Frozen denoiser plus its schedule, ready for extraction.
pub struct FeatureExtractor {
    model: Denoiser<f32>,
    sched: NoiseSchedule,
    checkpoint_hash: String,
}

fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ c.wrapping_mul(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl FeatureExtractor {
    pub fn new(model: Denoiser<f32>, sched: NoiseSchedule) -> Self {
        let mut ck = crate::checkpoint::denoiser_checkpoint(&model, &sched, serde_json::Value::Null, serde_json::Value::Null);
        ck.state = serde_json::Value::Null;
        let checkpoint_hash = bytes_hash(&ck.encode());
        Self { model, sched, checkpoint_hash }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, sched) = load_denoiser(ck)?;
        Ok(Self::new(model, sched))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.model.config()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn model(&self) -> &Denoiser<f32> {
        &self.model
    }

    /// Hash of the model parameters and schedule (used as a cache key).
    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    fn check_plan(&self, plan: &ExtractionPlan) -> Result<()> {
        select_levels(self.config(), &plan.levels)?;
        if plan.timesteps.is_empty() {
            return Err(Error::Invalid("no timesteps requested".into()));
        }
        for &t in &plan.timesteps {
            self.sched.check_step(t)?;
        }
        if plan.noise_samples == 0 {
            return Err(Error::Invalid("noise_samples must be at least 1".into()));
        }
        self.config().check_patch(plan.patch_shape)
    }

    /// Resolves the conditioning channel: conditioned models need `bpr`,
    /// unconditioned ones refuse it.
    pub fn conditioning(&self, v: &Volume, bpr: Option<&BprModel>) -> Result<Option<Volume>> {
        match (self.config().conditioned(), bpr) {
            (true, None) => Err(Error::Config(
                "conditioning mismatch: checkpoint is conditioned, a body-part regressor is required".into(),
            )),
            (false, Some(_)) => Err(Error::Config(
                "conditioning mismatch: checkpoint is unconditioned but a body-part regressor was given".into(),
            )),
            (true, Some(b)) => Ok(Some(coordinate_map(b, v)?)),
            (false, None) => Ok(None),
        }
    }

    /// Features of one patch `[1, pz, py, px]` (and its coordinate patch).
    pub fn patch_features(&self, x0: &Tensor<f32>, cond: Option<&Tensor<f32>>, plan: &ExtractionPlan, patch_index: usize) -> Result<Tensor<f32>> {
        let p = x0.spatial();
        let plane: usize = p.iter().product();
        let mut out = Vec::with_capacity(plan.channels(self.config()) * plane);
        for (ti, &t) in plan.timesteps.iter().enumerate() {
            let mut acc: Vec<Vec<f32>> = plan.levels.iter().map(|&l| vec![0.0; self.config().width(l) * plane]).collect();
            for k in 0..plan.noise_samples {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(plan.seed, patch_index as u64, ti as u64, k as u64));
                let eps: Tensor<f32> = gaussian_like(x0.shape(), &mut rng);
                let xt = q_sample(x0, t, &eps, &self.sched)?;
                let (_, pyramid) = self.model.infer(&xt, t, cond)?;
                for (slot, &l) in acc.iter_mut().zip(&plan.levels) {
                    let up = upsample_trilinear(&pyramid[l], p);
                    for (a, &v) in slot.iter_mut().zip(up.data()) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / plan.noise_samples as f32;
            for slot in acc {
                out.extend(slot.into_iter().map(|v| v * inv));
            }
        }
        let c = out.len() / plane;
        Ok(Tensor::new(vec![c, p[0], p[1], p[2]], out))
    }

    pub fn extract(&self, v: &Volume, bpr: Option<&BprModel>, plan: &ExtractionPlan) -> Result<FeatureVolume> {
        let coord = self.conditioning(v, bpr)?;
        self.extract_with_coord(v, coord.as_ref(), plan)
    }

    /// Extraction with a precomputed coordinate map.
    pub fn extract_with_coord(&self, v: &Volume, coord: Option<&Volume>, plan: &ExtractionPlan) -> Result<FeatureVolume> {
        self.check_plan(plan)?;
        if coord.is_some() != self.config().conditioned() {
            return Err(Error::Config("conditioning mismatch between checkpoint and coordinate input".into()));
        }
        let grid = plan_patch_grid(v.shape(), plan.patch_shape, plan.overlap)?;
        let p = plan.patch_shape;
        let shape4 = vec![1, p[0], p[1], p[2]];
        let mut outputs = Vec::with_capacity(grid.origins.len());
        for (i, &o) in grid.origins.iter().enumerate() {
            let x0 = Tensor::new(shape4.clone(), copy_region(v.data(), 1, v.shape(), o, p));
            let c = coord.map(|c| Tensor::new(shape4.clone(), copy_region(c.data(), 1, c.shape(), o, p)));
            outputs.push(self.patch_features(&x0, c.as_ref(), plan, i)?);
        }
        Ok(FeatureVolume { data: fuse_patches(&grid, &outputs)?, plan: plan.clone() })
    }
}

/// Extracts every volume of a set, through `cache` when given.
pub fn extract_all(
    fx: &FeatureExtractor,
    volumes: &[Volume],
    bpr: Option<&BprModel>,
    plan: &ExtractionPlan,
    cache: Option<&FeatureCache>,
) -> Result<Vec<FeatureVolume>> {
    volumes
        .iter()
        .map(|v| {
            let coord = fx.conditioning(v, bpr)?;
            match cache {
                Some(c) => c.get_or_extract(fx, v, coord.as_ref(), plan),
                None => fx.extract_with_coord(v, coord.as_ref(), plan),
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    shape: Vec<usize>,
    plan: ExtractionPlan,
    checkpoint_hash: String,
    volume_hash: String,
}

/// On-disk feature cache keyed by (checkpoint hash, volume hash, plan).
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn key(checkpoint_hash: &str, volume_hash: &str, plan: &ExtractionPlan) -> String {
        let plan = serde_json::to_string(plan).expect("plan serialises");
        bytes_hash(format!("{checkpoint_hash}\n{volume_hash}\n{plan}").as_bytes())
    }

    pub fn get_or_extract(
        &self,
        fx: &FeatureExtractor,
        v: &Volume,
        coord: Option<&Volume>,
        plan: &ExtractionPlan,
    ) -> Result<FeatureVolume> {
        let volume_hash = bytes_hash(&encode_volume(v));
        let key = Self::key(fx.checkpoint_hash(), &volume_hash, plan);
        let path = self.dir.join(format!("{key}.feat"));
        if let Ok(bytes) = fs::read(&path) {
            return decode_features(&bytes, &path);
        }
        let f = fx.extract_with_coord(v, coord, plan)?;
        let header = CacheHeader {
            shape: f.data.shape().to_vec(),
            plan: plan.clone(),
            checkpoint_hash: fx.checkpoint_hash().to_string(),
            volume_hash,
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        f32::write_le(f.data.data(), &mut out);
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(f)
    }
}

fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureVolume> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(path, "missing header"))?;
    let h: CacheHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, e.to_string()))?;
    let n: usize = h.shape.iter().product();
    if bytes.len() - nl - 1 != 4 * n {
        return Err(Error::format(path, "payload size mismatch"));
    }
    Ok(FeatureVolume { data: Tensor::new(h.shape, f32::from_le_slice(&bytes[nl + 1..])), plan: h.plan })
}
