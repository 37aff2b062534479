use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("activation cache miss for layer {layer}, sample {sample}")]
    CacheMiss { layer: usize, sample: usize },

    #[error("layer index {index} out of range 1..={depth}")]
    LayerOutOfRange { index: usize, depth: usize },

    #[error("degenerate depth: profile needs at least 2 parameterized layers, got {0}")]
    DegenerateDepth(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("internal consistency violation: {0}")]
    Consistency(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error record and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptyInput(_) => "empty_input",
            Error::CacheMiss { .. } => "cache_miss",
            Error::LayerOutOfRange { .. } => "layer_out_of_range",
            Error::DegenerateDepth(_) => "degenerate_depth",
            Error::Config(_) => "config",
            Error::Consistency(_) => "consistency",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Truncated(_) => "truncated",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Missing(_) => "missing",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
