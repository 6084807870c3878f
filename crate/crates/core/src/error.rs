use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("dimension mismatch: expected {expected}, got {found} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid training data: {0}")]
    InvalidData(String),

    #[error("no feasible configuration for boundary {boundary} in column {column}")]
    Infeasible { boundary: usize, column: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("rejection sampling gave up after {attempts} attempts: {reason}")]
    RejectionCap { attempts: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::IndexOutOfRange { .. } => "index",
            Error::DimensionMismatch { .. } => "dimension",
            Error::Singular(_) => "singular",
            Error::Degenerate(_) => "degenerate",
            Error::NonConvergence { .. } => "nonconvergence",
            Error::InvalidParameter(_) => "parameter",
            Error::InvalidData(_) => "data",
            Error::Infeasible { .. } => "infeasible",
            Error::Format(_) => "format",
            Error::VersionMismatch { .. } => "version",
            Error::RejectionCap { .. } => "rejection",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
