//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or channel counts disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// An architecture, folding or layer configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A weight store does not match the model it is bound to.
    #[error("binding error for `{name}`: {reason}")]
    Binding { name: String, reason: String },

    /// Calibration statistics are missing for an activation site.
    #[error("calibration error: no statistics for site `{0}`")]
    Calibration(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    /// No folding meets the latency target; `layer` is the bottleneck.
    #[error("infeasible target: layer `{layer}` needs {needed} cycles at full parallelism, budget is {budget}")]
    Infeasible {
        layer: String,
        needed: u64,
        budget: u64,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 1 usage, 2 data/IO,
    /// 3 config/shape.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Shape(_)
            | Error::Config(_)
            | Error::Binding { .. }
            | Error::Infeasible { .. } => 3,
            Error::NumericDomain(_)
            | Error::Calibration(_)
            | Error::Integrity(_)
            | Error::UndefinedMetric(_)
            | Error::BadMagic { .. }
            | Error::Truncated(_)
            | Error::DuplicateName(_)
            | Error::UnknownDtype(_)
            | Error::UnsupportedVersion(_)
            | Error::UnsupportedFormat(_)
            | Error::Io { .. }
            | Error::Json { .. } => 2,
        }
    }
}
