use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no valid rows remain")]
    EmptyTable,

    #[error("duplicate driver-week ({driver_id}, {week})")]
    DuplicateRow { driver_id: String, week: u32 },

    #[error("row {row} has {found} covariates, expected {expected}")]
    CovariateLength {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no features remain after filtering")]
    NoFeaturesRemain,

    #[error("{drivers} drivers cannot fill {folds} folds")]
    TooFewDrivers { drivers: usize, folds: usize },

    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),

    #[error("driver `{0}` has zero likelihood under every group")]
    ImpossibleDriver(String),

    #[error("driver `{0}` was not part of the training data")]
    UnknownDriver(String),

    #[error("all {restarts} EM restarts failed (last error: {last})")]
    AllRestartsFailed { restarts: usize, last: String },

    #[error("null log-likelihood {0} is not negative")]
    DegenerateNull(f64),

    #[error("fitted model has {fitted} groups, truth has {truth}")]
    GMismatch { truth: usize, fitted: usize },

    #[error("truncated generalized Poisson support loses {deficiency:.3e} of its mass")]
    SupportExhausted { deficiency: f64 },

    #[error("fit failed: {0}")]
    Fit(String),

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
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
