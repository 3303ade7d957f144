use std::path::PathBuf;

use thiserror::Error;

use crate::admm::TraceRow;

/// Which configuration rule a scenario broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationKind {
    Schema,
    Bound,
    NoArbitrage,
    ControlExceedsMax,
    DelayTooShort,
    ServiceBelowPeak,
    StorageWindow,
    Trace,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration ({kind:?}) at `{field}`: {detail}")]
    Validation { kind: ValidationKind, field: String, detail: String },

    #[error("constraint violated at site {site}: {detail}")]
    ConstraintViolation { site: usize, detail: String },

    #[error("slot problem construction failed: {0}")]
    ProblemConstruction(String),

    #[error("ADM-G did not reach feasibility after {iterations} iterations (ell = {ell:.3e})")]
    SolverFailure { iterations: usize, ell: f64, trace: Vec<TraceRow> },

    #[error("reference oracle failed: {0}")]
    Oracle(String),

    #[error("slot {slot}: {source}")]
    Slot {
        slot: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("internal invariant breached: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(kind: ValidationKind, field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation { kind, field: field.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Strips slot wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Slot { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_validation(&self) -> bool {
        matches!(self.root(), Error::Validation { .. })
    }

    pub fn is_solver_failure(&self) -> bool {
        matches!(self.root(), Error::SolverFailure { .. } | Error::Oracle(_) | Error::ProblemConstruction(_))
    }
}
