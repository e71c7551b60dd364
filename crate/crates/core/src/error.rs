use std::fmt;

/// Errors surfaced by the pipeline crates.
#[derive(Debug)]
pub enum Error {
    /// A configuration or argument value is outside its valid range.
    InvalidArgument(String),
    /// A diffusion step index lies outside `1..=horizon`.
    StepOutOfRange { tau: usize, horizon: usize },
    /// Vector or matrix dimensions do not line up.
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    /// A computation produced NaN or infinity; the string locates it.
    NonFinite(String),
    /// The body Jacobian is rank deficient at the queried state.
    SingularJacobian,
    /// A persisted file is truncated, has a bad checksum, or fails to parse.
    Corrupt(String),
    /// A persisted file parsed but is unusable here (schema or shape mismatch).
    Incompatible(String),
    /// Training loss became non-finite.
    Divergence(String),
    /// The expert could not produce enough successful demonstrations.
    InsufficientDemos { wanted: usize, got: usize },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::StepOutOfRange { tau, horizon } => {
                write!(f, "diffusion step {tau} outside 1..={horizon}")
            }
            Error::DimensionMismatch { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::SingularJacobian => write!(f, "body Jacobian is rank deficient"),
            Error::Corrupt(msg) => write!(f, "corrupt file: {msg}"),
            Error::Incompatible(msg) => write!(f, "incompatible file: {msg}"),
            Error::Divergence(msg) => write!(f, "training diverged: {msg}"),
            Error::InsufficientDemos { wanted, got } => {
                write!(f, "only {got} successful demonstrations, wanted {wanted}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
