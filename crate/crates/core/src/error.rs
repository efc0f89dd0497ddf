//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset has no labels: {0}")]
    MissingLabels(&'static str),

    #[error("backward called without a cached forward pass")]
    BackwardBeforeForward,

    #[error("degenerate centers: tr(Sb) = {tr_sb:e} is not above {eps:e}")]
    DegenerateCenters { tr_sb: f64, eps: f64 },

    #[error("row {row} of a probability matrix sums to {sum}, expected 1")]
    NotNormalized { row: usize, sum: f64 },

    #[error("{0} domain absent from the batch")]
    DomainMissing(&'static str),

    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("non-finite metric passed to early stopping")]
    NonFiniteMetric,

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, CLI arguments,
    /// malformed files) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidParameter(_)
                | Error::Parse { .. }
                | Error::LabelOutOfRange { .. }
                | Error::MissingLabels(_)
        )
    }
}
