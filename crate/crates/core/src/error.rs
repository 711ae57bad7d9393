use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("pixel index {index} out of range for {n_pixels}-pixel array")]
    PixelOutOfRange { index: usize, n_pixels: usize },

    #[error("no detectable channels left after masking")]
    EmptyChannelSet,

    #[error("quadrature did not converge on [{lo}, {hi}] (estimated error {error:e})")]
    QuadratureFailure { lo: f64, hi: f64, error: f64 },

    #[error("singular channel ({branch}, {i}, {j}): zero probability with nonzero derivative at dx = {dx}")]
    SingularChannel {
        branch: char,
        i: i64,
        j: i64,
        dx: f64,
    },

    #[error("number of events must be at least 1")]
    ZeroEvents,

    #[error("degenerate probability table: {0}")]
    DegenerateTable(String),

    #[error("truncated record at byte offset {offset}")]
    TruncatedRecord { offset: usize },

    #[error("malformed time-tag stream at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("TAC offset of {bins} bins does not fit in the {range}-bin ramp")]
    WindowOverflow { bins: i64, range: u32 },

    #[error("fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("rank-deficient Jacobian: {reason}")]
    RankDeficient {
        reason: String,
        partial: Box<crate::fit::BeatFitParams>,
    },

    #[error("model value {value} is not positive for channel {channel} at dx = {dx}")]
    NonPositiveModel {
        channel: String,
        dx: f64,
        value: f64,
    },

    #[error("likelihood maximum at dx = {dx} sits on the search window boundary [{lo}, {hi}]")]
    BoundaryMaximum { dx: f64, lo: f64, hi: f64 },

    #[error(
        "dx = {dx} is not a stationary point of the log-likelihood (derivative {derivative:e})"
    )]
    NonStationary { dx: f64, derivative: f64 },

    #[error("log-likelihood curvature {curvature:e} is not negative at dx = {dx}")]
    NonNegativeCurvature { dx: f64, curvature: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidParameter(_)
            | PixelOutOfRange { .. }
            | EmptyChannelSet
            | ZeroEvents
            | WindowOverflow { .. }
            | TruncatedRecord { .. }
            | Format { .. } => ErrorKind::Validation,
            Io(_) | Csv(_) | Json(_) => ErrorKind::Io,
            QuadratureFailure { .. }
            | SingularChannel { .. }
            | DegenerateTable(_)
            | NonConvergence { .. }
            | RankDeficient { .. }
            | NonPositiveModel { .. }
            | BoundaryMaximum { .. }
            | NonStationary { .. }
            | NonNegativeCurvature { .. } => ErrorKind::Numerical,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
