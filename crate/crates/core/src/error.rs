use thiserror::Error;

pub type Result<T> = std::result::Result<T, MorError>;

#[derive(Debug, Error)]
pub enum MorError {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("expert index {index} out of range for {count} experts")]
    ExpertIndex { index: usize, count: usize },

    #[error("jacobi SVD did not converge after {sweeps} sweeps (max off-diagonal cosine {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },

    #[error("non-finite loss while differencing coordinate {0}")]
    NonFiniteLoss(usize),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::cli::checkpoint::CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MorError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        MorError::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
