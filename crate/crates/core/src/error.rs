use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    /// A barrier argument `G_j` is not strictly positive.
    #[error("barrier domain violated at stage {stage}: constraint {index} has value {value}")]
    Domain { stage: usize, index: usize, value: f64 },

    /// A pivot or diagonal entry vanished in a factorization or splitting.
    #[error("singular {what} at stage {stage} (index {index})")]
    Singular {
        what: &'static str,
        stage: usize,
        index: usize,
    },

    /// An inner nonlinear solve (the plant integrator) did not converge.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Re-labels a singularity with the stage it occurred in.
    pub(crate) fn at_stage(self, stage: usize) -> Self {
        match self {
            Error::Singular { what, index, .. } => Error::Singular { what, stage, index },
            Error::Domain { index, value, .. } => Error::Domain { stage, index, value },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
