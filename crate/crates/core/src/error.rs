use thiserror::Error;

/// Failures of the vehicle model and everything built on top of it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("speed {speed} m/s is below the model floor {floor} m/s")]
    SingularSpeed { speed: f64, floor: f64 },

    #[error("longitudinal force {fx} N leaves no lateral capacity (mu*Fz = {limit} N)")]
    CapacityExceeded { fx: f64, limit: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("traced region does not enclose the origin: {0}")]
    DegenerateRegion(String),

    #[error("pole list is empty")]
    EmptyPoles,

    #[error("no equilibrium found: {0}")]
    NoConvergence(String),

    #[error(transparent)]
    Params(#[from] ParamsError),
}

/// Problems with key/value documents and parameter validation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("line {line}: expected `name = value`")]
    Syntax { line: usize },

    #[error("line {line}: cannot parse value for `{key}`: {value}")]
    BadValue { line: usize, key: String, value: String },

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("duplicate key `{0}`")]
    DuplicateKey(String),

    #[error("missing required key `{0}`")]
    MissingKey(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Invalid { name: &'static str, reason: String },

    #[error("{0}")]
    Io(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
