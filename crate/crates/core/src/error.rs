use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("unknown variable {0}")]
    UnknownVariable(usize),

    #[error("variable {0} already exists")]
    DuplicateVariable(usize),

    #[error("covariance is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("indeterminate system: variables {0:?} are unconstrained")]
    Indeterminate(Vec<usize>),

    #[error("missing odometry between states {0} and {1}")]
    MissingOdometry(usize, usize),

    #[error("too few samples: need {needed}, have {have}")]
    TooFew { needed: usize, have: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Indeterminate(_) | Error::NotPositiveDefinite(_) => 3,
            _ => 2,
        }
    }
}
