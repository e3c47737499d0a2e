use thiserror::Error;

use crate::sc::ScWeights;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing cell for unit `{unit}` at {time}")]
    MissingCell { unit: String, time: String },
    #[error("duplicate cell for unit `{unit}` at {time}")]
    DuplicateCell { unit: String, time: String },
    #[error("non-finite value in {field} for unit `{unit}` at {time}")]
    NonFiniteValue {
        field: &'static str,
        unit: String,
        time: String,
    },
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("rolling window around unit `{unit}` day {day} is entirely zero")]
    AllZeroWindow { unit: String, day: usize },
    #[error("window [{start}, {end}) is outside the panel range 0..{len}")]
    WindowOutOfRange { start: i64, end: i64, len: usize },
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("singular linear system")]
    SingularSystem,
    #[error("empty series")]
    EmptySeries,
    #[error("no eligible donor for treated unit `{0}`")]
    EmptyPool(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("simplex fit did not converge (gap {:.3e})", best.gap)]
    NonConvergence { best: Box<ScWeights> },
    #[error("counterfactual sum is not positive")]
    NonPositiveDenominator,
    #[error("log density is not finite")]
    NonFiniteDensity,
    #[error("constant pre-period heat for unit `{0}`")]
    ZeroPreSd(String),
    #[error("calibration target for unit `{0}` is not positive")]
    NonPositiveTarget(String),
    #[error("fits and truth are misaligned: {0}")]
    Misalignment(String),
    #[error("scenario grid is missing {}", .0.join(", "))]
    IncompleteGrid(Vec<String>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent user input.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::NonConvergence { .. } | Error::NonFiniteDensity | Error::SingularSystem
        )
    }
}
