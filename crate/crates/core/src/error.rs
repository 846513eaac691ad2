use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("{what} is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd {
        what: &'static str,
        min_eigenvalue: f64,
    },

    #[error("innovation covariance is singular (condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("time step must be positive and finite, got {0}")]
    InvalidDt(f64),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("gain source returned a non-finite gain at step {step}")]
    NonFiniteGain { step: usize },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("training diverged at epoch {epoch}, window {window}: loss {loss:e}")]
    Diverged {
        epoch: usize,
        window: usize,
        loss: f64,
    },

    #[error("parameter manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("invalid combination weights: {0}")]
    InvalidWeights(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: time column is not strictly increasing at line {line}")]
    NonMonotoneTime { path: PathBuf, line: usize },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("client {client} aborted in round {round}: {source}")]
    ClientAborted {
        round: usize,
        client: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (divergence, singular matrices,
    /// non-finite values) as opposed to bad inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::NotPsd { .. }
            | Error::Singular { .. }
            | Error::NonFiniteGain { .. }
            | Error::NonFiniteLoss { .. }
            | Error::Diverged { .. } => true,
            Error::ClientAborted { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
