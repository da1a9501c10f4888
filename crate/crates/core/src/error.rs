use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two operands disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violates an operation's precondition.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// The global budget cannot cover the per-head floor.
    #[error("infeasible budget: B = {budget} but at least {required} slots are required")]
    InfeasibleBudget { budget: u64, required: u64 },

    /// A cache policy hook produced an invalid retention set.
    #[error("rejected policy: {0}")]
    Policy(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::InfeasibleBudget { .. } => "infeasible_budget",
            Error::Policy(_) => "policy",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
