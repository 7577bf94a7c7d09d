use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, widths or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input outside the domain of a closed-form expression.
    #[error("domain error: {0}")]
    Domain(String),

    /// Exhaustive enumeration would exceed its budget.
    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("ingest error in {}: {detail}", file.display())]
    Ingest { file: PathBuf, detail: String },

    /// Training loss became non-finite; the last good checkpoint was kept.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Prefixes the op name of a numeric error with extra context (a block
    /// index, a ladder level, an objective term).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric { op, detail } => Error::Numeric {
                op: format!("{ctx}/{op}"),
                detail,
            },
            other => other,
        }
    }
}
