use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column {0} has zero variance")]
    ZeroVarianceColumn(usize),
    #[error("need at least {needed} events to build {needed} intervals, found {found}")]
    TooFewEvents { needed: usize, found: usize },
    #[error("event-time quantiles are tied; intervals would collapse")]
    DegenerateQuantiles,
    #[error("invalid interval grid: {0}")]
    InvalidGrid(String),
    #[error("invalid column pair ({0}, {1})")]
    InvalidPair(usize, usize),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("data schema: {0}")]
    DataSchema(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("log posterior is not finite")]
    NonFiniteLogPosterior,
    #[error("objective is not finite")]
    NonFiniteObjective,
    #[error("step size underflow (c = {0:e})")]
    StepSizeUnderflow(f64),
    #[error("gradient is degenerate: {0}")]
    DegenerateGradient(String),
    #[error("group {0} is too small for a separate fit")]
    GroupTooSmall(usize),
    #[error("rank deficient pseudo random effects (V({0}) = 0)")]
    RankDeficient(usize),
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroVarianceColumn(_) => "ZERO_VARIANCE_COLUMN",
            Error::TooFewEvents { .. } => "TOO_FEW_EVENTS",
            Error::DegenerateQuantiles => "DEGENERATE_QUANTILES",
            Error::InvalidGrid(_) => "INVALID_GRID",
            Error::InvalidPair(..) => "INVALID_PAIR",
            Error::InvalidData(_) => "INVALID_DATA",
            Error::DataSchema(_) => "DATA_SCHEMA",
            Error::InvalidParameter(_) => "INVALID_PARAMETER",
            Error::DimensionMismatch(_) => "DIMENSION_MISMATCH",
            Error::NonFiniteLogPosterior => "NON_FINITE_LOG_POSTERIOR",
            Error::NonFiniteObjective => "NON_FINITE_OBJECTIVE",
            Error::StepSizeUnderflow(_) => "STEP_SIZE_UNDERFLOW",
            Error::DegenerateGradient(_) => "DEGENERATE_GRADIENT",
            Error::GroupTooSmall(_) => "GROUP_TOO_SMALL",
            Error::RankDeficient(_) => "RANK_DEFICIENT",
            Error::NoComparablePairs => "NO_COMPARABLE_PAIRS",
            Error::Io(_) => "IO",
            Error::Csv(_) => "PARSE",
            Error::Json(_) => "PARSE",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
