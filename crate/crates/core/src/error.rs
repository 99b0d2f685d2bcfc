use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at index {index}: {detail}")]
    DimensionMismatch { index: usize, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("signal {signal}: no feasible block (every block Gram matrix is singular)")]
    NoFeasibleBlock { signal: usize },

    #[error("block {block} has no assigned signals")]
    EmptyBlock { block: usize },

    #[error("block is rank deficient: numerical rank {rank} < {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("ill-conditioned Gram matrix (condition number {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("no signal is feasible for any initial block")]
    InitializationFailure,

    #[error("SVT diverged at iteration {iteration} (residual {residual:e}); try a smaller step size delta")]
    Divergence { iteration: usize, residual: f64 },

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
