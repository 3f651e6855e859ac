use thiserror::Error;

/// Errors surfaced by data validation, basis construction and sampling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero design variance for area {0}")]
    ZeroDesignVariance(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown area {0}")]
    UnknownArea(String),

    #[error("year {year} outside the study window {first}..={last}")]
    YearOutOfWindow { year: i32, first: i32, last: i32 },

    #[error("zero total population for {area} in {year}")]
    ZeroPopulation { area: String, year: i32 },

    #[error("rejection sampling failed for {0} after 1e6 proposals")]
    RejectionFailure(String),

    #[error("block {block} is not positive definite after jitter escalation")]
    NotPositiveDefinite { block: String },

    #[error("degenerate chain: {0}")]
    DegenerateChain(String),

    #[error("missing cells: {0}")]
    MissingCells(String),

    #[error("missing raw sample size for area {0}")]
    MissingSampleSize(String),

    #[error("sampler produced a non-finite state at iteration {iteration}: {detail}")]
    NonFiniteState { iteration: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
