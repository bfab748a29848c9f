use thiserror::Error;

/// Errors raised by the flow engine.
#[derive(Debug, Error)]
pub enum SnfError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("singular matrix: pivot {index} has magnitude {magnitude:e}")]
    SingularMatrix { index: usize, magnitude: f64 },

    #[error("kernel extents must be odd, got {0:?}")]
    EvenKernel(Vec<usize>),

    #[error("dimension {dim} exceeds the materialization limit {limit}")]
    SizeGuard { dim: usize, limit: usize },

    #[error("iterative inversion did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: u64,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic number {found:#010x}")]
    BadMagic { found: u32 },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SnfError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> SnfError {
    SnfError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
