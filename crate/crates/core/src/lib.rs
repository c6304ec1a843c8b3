pub mod conditioner;
pub mod data;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod vae;

pub use conditioner::{CondParams, Condition};
pub use data::{Manifest, MixtureRecord, Split};
pub use diffusion::{DenoiserParams, NoiseSchedule, SamplerPlan, ScheduleKind};
pub use dsp::{AudioClip, SpectrogramComplex, StftConfig};
pub use error::{Error, Result};
pub use metrics::{ClipScores, MetricsReport};
pub use pipeline::{enhance, run_experiment, EnhanceOptions, Experiment, Mode, Models, RunConfig};
pub use vae::{LatentMap, VaeParams};
