use thiserror::Error;

/// Errors raised anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("no records")]
    NoRecords,

    #[error("empty group `{0}`")]
    EmptyGroup(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("no testable endpoint")]
    NoTestableEndpoint,

    #[error("exact enumeration infeasible: {count} arrangements exceed threshold {threshold}")]
    TooManyPermutations { count: String, threshold: u64 },

    #[error("matrix is not positive semidefinite")]
    NotPsd,

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
