use thiserror::Error;

/// Errors produced by model construction, simulation, identification and
/// certificate handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("C·T0 = 0, uncertainty direction is invisible in the output")]
    DegenerateDirection,

    #[error("{term}{slot} residual is not expressible as T0·κ (residual norm {residual:.3e})")]
    NotMatching {
        term: char,
        slot: usize,
        residual: f64,
    },

    #[error("plant delay {delay} is missing from the delay grid")]
    DelayNotInGrid { delay: f64 },

    #[error("non-finite input to nonlinearity `{0}`")]
    NonFiniteInput(String),

    #[error("unknown nonlinearity `{0}`")]
    UnknownNonlinearity(String),

    #[error("invalid simulation settings: {0}")]
    InvalidSim(String),

    #[error("lookup at t = {t} is beyond the last recorded time {last}")]
    BeyondHistory { t: f64, last: f64 },

    #[error("history underrun: t = {t} precedes the retained window starting at {first}")]
    HistoryUnderrun { t: f64, first: f64 },

    /// `stage` is the RK4 stage (1–4) whose input or result was non-finite;
    /// 0 means the initial state.
    #[error("non-finite state detected at t = {t} (RK4 stage {stage})")]
    BlowUp { t: f64, stage: u8 },

    #[error("invalid input signal: {0}")]
    InvalidInput(String),

    #[error("series of length {available} s is shorter than the window {window} s")]
    WindowTooLong { window: f64, available: f64 },

    #[error("trajectory starts at {start} but lookups reach back to {needed}")]
    TrajectoryTooShort { start: f64, needed: f64 },

    #[error("invalid identifier configuration: {0}")]
    InvalidIdentifier(String),

    #[error("{0} is not symmetric")]
    Asymmetric(String),

    #[error("the affine set P·T0 = Cᵀ is empty")]
    EmptyAffineSet,

    #[error("non-finite objective during feasibility search")]
    NonFiniteObjective,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::Dimension {
        context: context.to_string(),
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
