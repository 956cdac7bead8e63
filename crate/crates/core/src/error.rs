use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum OpalError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("eigendecomposition failed for layer {layer}")]
    Eigen { layer: usize },

    #[error("layer {layer} has {params} parameters, above the dense limit {limit}; use the matrix-vector form")]
    TooLarge {
        layer: usize,
        params: usize,
        limit: usize,
    },

    #[error("degenerate evidence: {0}")]
    DegenerateEvidence(String),

    #[error("degenerate model set: {0}")]
    DegenerateSet(String),

    #[error("missing state: {0}")]
    State(String),

    #[error("category {category} failed: every candidate degenerated")]
    CategoryFailed { category: usize },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("parse error at row {row}, column {column}: {detail}")]
    Parse {
        row: usize,
        column: String,
        detail: String,
    },

    #[error("artifact version {found} is incompatible (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = OpalError> = std::result::Result<T, E>;
