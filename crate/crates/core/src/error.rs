use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by rdmkit operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: row {row}: {message}")]
    Ingestion {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("negative value {value} at partition {partition}, row {row}, column {column}")]
    Domain {
        partition: usize,
        row: usize,
        column: usize,
        value: f64,
    },

    #[error("residuals required: dataset has no residual matrices")]
    MissingResiduals,

    #[error("partition {partition} has {rows} residual rows but {regressors} regressors; need more rows than regressors")]
    DegreesOfFreedom {
        partition: usize,
        rows: usize,
        regressors: usize,
    },

    #[error("matrix is too ill-conditioned ({0}); increase the shrinkage weight")]
    Conditioning(String),

    #[error("crossvalidation needs at least two partitions, got {0}")]
    CrossvalidationInfeasible(usize),

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("precision weighting failed: {0}")]
    Regularization(String),

    #[error("need at least as many channels as conditions for exact signal generation (k = {k}, p = {p})")]
    InsufficientChannels { k: usize, p: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
