//! Error and result types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MdmError>;

#[derive(Debug, Error)]
pub enum MdmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A row whose L2 norm is too small to normalize.
    #[error("degenerate row {row}: norm {norm:.3e} below threshold")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad set size: {0}")]
    Size(String),

    #[error("expert pool: {0}")]
    Pool(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MdmError {
    /// Exit-code class for process front-ends:
    /// 1 usage/config, 2 data/format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            MdmError::Config(_) | MdmError::Unsupported(_) => 1,
            MdmError::Shape(_)
            | MdmError::Size(_)
            | MdmError::Pool(_)
            | MdmError::Format(_)
            | MdmError::Data(_)
            | MdmError::Io(_)
            | MdmError::Json(_) => 2,
            MdmError::DegenerateRow { .. } | MdmError::Numeric(_) | MdmError::State(_) => 3,
        }
    }

    /// Stable machine-readable class tag for structured error output.
    pub fn class(&self) -> &'static str {
        match self {
            MdmError::Shape(_) => "shape",
            MdmError::DegenerateRow { .. } => "degenerate_row",
            MdmError::Config(_) => "config",
            MdmError::Numeric(_) => "numeric",
            MdmError::Size(_) => "size",
            MdmError::Pool(_) => "pool",
            MdmError::Format(_) => "format",
            MdmError::Data(_) => "data",
            MdmError::State(_) => "state",
            MdmError::Unsupported(_) => "unsupported",
            MdmError::Io(_) => "io",
            MdmError::Json(_) => "json",
        }
    }
}
