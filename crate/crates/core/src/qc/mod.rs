//! Quality control: image metrics, cohort screening, visual inspection and
//! verdict aggregation.

mod checkpoint;
mod grid;
mod metrics;
mod screen;
mod visual;

pub use checkpoint::*;
pub use grid::*;
pub use metrics::*;
pub use screen::*;
pub use visual::*;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QcError {
    #[error("grid dimensions differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("both masks are empty")]
    BothEmpty,
    #[error("both images are constant; entropy is zero")]
    DegenerateEntropy,
    #[error("image has zero variance")]
    ZeroVariance,
    #[error("label {0} does not occur in the grid")]
    LabelAbsent(i64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("need at least 4 values for IQR screening, got {0}")]
    TooFewValues(usize),
    #[error("invalid screening rule: {0}")]
    InvalidRule(String),
    #[error("metric table has no subject column")]
    NoSubjectColumn,
    #[error("parse error in {path}: {reason}")]
    ParseError { path: String, reason: String },
    #[error("malformed judge output: {0}")]
    MalformedJudgeOutput(String),
    #[error("judge used {0} turns without issuing a verdict")]
    TurnLimitWithoutVerdict(usize),
    #[error("no steps to aggregate")]
    NoSteps,
    #[error("judge failure: {0}")]
    JudgeFailure(String),
    #[error("cohort source: {0}")]
    Source(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
