use thiserror::Error;

/// Errors raised by the market model, clearing and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },

    #[error(
        "asset {index} is not controllable (margins {lower_margin}, {upper_margin} must both be > 0)"
    )]
    NotControllable {
        index: usize,
        lower_margin: f64,
        upper_margin: f64,
    },

    #[error("state {x} lies outside [{lo}, {hi}]; use the fallback policy")]
    OutOfBox { x: f64, lo: f64, hi: f64 },

    #[error("state {x} lies inside [{lo}, {hi}]; the market allocation applies")]
    InsideBox { x: f64, lo: f64, hi: f64 },

    #[error("population is empty")]
    EmptyPopulation,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("clearing bracket [{lo}, {hi}] has no sign change (excess {excess_lo}, {excess_hi})")]
    BracketFailure {
        lo: f64,
        hi: f64,
        excess_lo: f64,
        excess_hi: f64,
    },

    #[error("no convergence after {iterations} iterations (last residual {residual})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("clearing failed at period {period}: {source}")]
    Period {
        period: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("segment has {len} periods, at least {min} are required")]
    SegmentTooShort { len: usize, min: usize },

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("output error: {0}")]
    Output(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Output(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Output(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Output(e.to_string())
    }
}
