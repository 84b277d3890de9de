//! Checkpoint container: one JSON manifest line (tensor table, model config,
//! schedule, training state) followed by a raw little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bpr::{BprConfig, BprModel};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

const FORMAT: &str = "voxdiff-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Denoiser,
    Bpr,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: ModelKind,
    config: serde_json::Value,
    schedule: Option<ScheduleParams>,
    state: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub schedule: Option<ScheduleParams>,
    /// Free-form training state (step counters, rng, optimiser settings).
    pub state: serde_json::Value,
    pub tensors: ParamSet<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::with_capacity(4 * self.tensors.num_scalars());
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset: payload.len() });
            f32::write_le(t.data(), &mut payload);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind,
            config: self.config.clone(),
            schedule: self.schedule,
            state: self.state.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serialises");
        out.push(b'\n');
        out.extend(payload);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |why: String| Error::Checkpoint(format!("{}: corrupt checkpoint: {why}", path.display()));
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing manifest line".into()))?;
        let m: Manifest = serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(corrupt(format!("unsupported format {} v{}", m.format, m.version)));
        }
        let payload = &bytes[nl + 1..];
        let mut tensors = ParamSet::new();
        let mut expected = 0;
        for e in m.tensors {
            if e.dtype != "f32" {
                return Err(corrupt(format!("tensor {} has unknown dtype {:?}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            if e.offset != expected || end > payload.len() {
                return Err(corrupt(format!("tensor {} lies outside the payload", e.name)));
            }
            expected = end;
            tensors.insert(e.name, Tensor::new(e.shape, f32::from_le_slice(&payload[e.offset..end])));
        }
        if expected != payload.len() {
            return Err(corrupt(format!("payload has {} trailing bytes", payload.len() - expected)));
        }
        Ok(Self { kind: m.kind, config: m.config, schedule: m.schedule, state: m.state, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (k, v) in self.tensors.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    pub fn insert_section(&mut self, prefix: &str, tensors: &ParamSet<f32>) {
        for (k, v) in tensors.iter() {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        self.expect_kind(ModelKind::Denoiser)?;
        serde_json::from_value(self.config.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("bad denoiser config: {e}")))
    }
}

pub const PARAM_PREFIX: &str = "param.";

/// Packs a denoiser; `extra_config` is merged next to the model config.
pub fn denoiser_checkpoint(
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    extra_config: serde_json::Value,
    state: serde_json::Value,
) -> Checkpoint {
    let config = serde_json::json!({ "model": model.config(), "training": extra_config });
    let mut ck = Checkpoint {
        kind: ModelKind::Denoiser,
        config,
        schedule: Some(schedule.params()),
        state,
        tensors: ParamSet::new(),
    };
    ck.insert_section(PARAM_PREFIX, model.named_tensors());
    ck
}

pub fn load_denoiser(ck: &Checkpoint) -> Result<(Denoiser<f32>, NoiseSchedule)> {
    let config = ck.denoiser_config()?;
    let params = ck.section(PARAM_PREFIX);
    let model = Denoiser::from_params(config, params)?;
    let sched = ck.schedule.ok_or_else(|| Error::Checkpoint("denoiser checkpoint has no schedule".into()))?;
    Ok((model, NoiseSchedule::from_params(sched)?))
}

pub fn bpr_checkpoint(model: &BprModel) -> Checkpoint {
    let mut ck = Checkpoint {
        kind: ModelKind::Bpr,
        config: serde_json::json!({ "model": model.config }),
        schedule: None,
        state: serde_json::json!({ "score_min": model.score_min, "score_max": model.score_max }),
        tensors: ParamSet::new(),
    };
    ck.insert_section(PARAM_PREFIX, &model.params);
    ck
}

pub fn load_bpr(ck: &Checkpoint) -> Result<BprModel> {
    ck.expect_kind(ModelKind::Bpr)?;
    let config: BprConfig = serde_json::from_value(ck.config.get("model").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("bad regressor config: {e}")))?;
    let score = |key: &str| {
        ck.state
            .get(key)
            .and_then(serde_json::Value::as_f64)
            .map(|v| v as f32)
            .ok_or_else(|| Error::Checkpoint(format!("regressor checkpoint lacks {key}")))
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = BprModel::new(config, &mut rng);
    model.params.load_from(ck.section(PARAM_PREFIX))?;
    model.score_min = score("score_min")?;
    model.score_max = score("score_max")?;
    Ok(model)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
