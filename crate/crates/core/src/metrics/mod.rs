//! Objective quality measures and corpus evaluation.

mod estoi;
mod report;
mod scale_invariant;

pub use estoi::{estoi, MIN_DURATION_SECS};
pub use scale_invariant::{decompose, si_sdr, si_sir_sar, Decomposition, CAP_DB};
pub use report::{
    enhanced_path, evaluate_corpus, score_clip, Aggregate, ClipScores, MeanStd, MetricsReport,
    CSV_HEADER,
};
