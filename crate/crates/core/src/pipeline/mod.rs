//! End-to-end recipe: configuration, enhancement, ablation and the
//! experiment runner.

mod ablation;
mod config;
mod enhance;
mod experiment;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ablation::{ablate, AblationCell, AblationReport, AblationSpec, SnrBucket, BUCKET_HEADER, GRID_HEADER};
pub use config::{
    AblationSection, ConditionerSection, CorpusSection, DiffusionSection, ExperimentSection,
    OptimizerSection, RunConfig, SamplingSection, StftSection, VaeSection,
};
pub use enhance::{clip_seed, enhance, enhance_split, prepare_examples, EnhanceOptions, Models};
pub use experiment::{
    run_experiment, Experiment, ExperimentSummary, FrozenCheck, TrainingLogs, SNAPSHOT_FILE, STAGES,
};

/// Whether sampling sees the condition or the null token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Conditional,
    Unconditional,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Conditional => "conditional",
            Mode::Unconditional => "unconditional",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" | "cond" => Ok(Mode::Conditional),
            "unconditional" | "uncond" => Ok(Mode::Unconditional),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}
