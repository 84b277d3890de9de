//! Diffusion pretraining of dense 3D features with body-coordinate
//! conditioning, and a frozen-feature probing harness.

pub mod attention;
pub mod bpr;
pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod kernels;
pub mod nn;
pub mod pretrain;
pub mod probing;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod volumes;

pub use bpr::{coordinate_map, train_bpr, BprConfig, BprModel};
pub use checkpoint::{Checkpoint, ModelKind};
pub use denoiser::{AttnKind, Denoiser, DenoiserConfig};
pub use diffusion::{make_schedule, NoiseSchedule, ScheduleParams};
pub use features::{select_levels, ExtractionPlan, FeatureCache, FeatureExtractor, FeatureVolume};
pub use error::{Error, Result};
pub use pretrain::{resume, train_ddpm, PretrainConfig};
pub use probing::{dice, group_report, segment, train_probe, ClassCatalog, DiceReport, ProbeConfig, ProbeHead};
pub use synth::{generate_corpus, generate_phantom, DistributionTag, Phantom, PhantomConfig, SizeGroup};
pub use tensor::Tensor;
pub use volumes::{Volume, VolumeKind};
