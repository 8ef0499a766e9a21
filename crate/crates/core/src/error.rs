use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("differentiation target must be a scalar, got shape {0:?}")]
    NonScalarTarget(Vec<usize>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("infeasible budget: {budget} bits requested, minimum feasible is {minimum} bits")]
    Infeasible { budget: u64, minimum: u64 },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Infeasible { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
