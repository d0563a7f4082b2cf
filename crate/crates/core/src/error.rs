use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("InvalidInput: {0}")]
    InvalidInput(String),

    #[error("RankError: requested rank {requested} outside 1..={max}")]
    RankError { requested: usize, max: usize },

    #[error("SingularDesign: {0}")]
    SingularDesign(String),

    #[error("ParseError: {0}")]
    ParseError(String),

    #[error("EmptySeries: series `{0}` has no observed entries")]
    EmptySeries(String),

    #[error("DegenerateSeries: series `{0}` has zero observed variance or fewer than two observations")]
    DegenerateSeries(String),

    #[error("StateError: {0}")]
    StateError(String),

    #[error("NoBalancedBlock: {0}")]
    NoBalancedBlock(String),

    #[error("OrderCondition: {0}")]
    OrderCondition(String),

    #[error("MaskedInput: {0}")]
    MaskedInput(String),

    #[error("CollinearLoadings: {0}")]
    CollinearLoadings(String),

    #[error("SingularSubBlock: {0}")]
    SingularSubBlock(String),

    #[error("InsufficientData: {0}")]
    InsufficientData(String),

    #[error("DegenerateDof: degrees of freedom {0} must be positive")]
    DegenerateDof(i64),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by the shape or content of user input, as
    /// opposed to failures inside an estimator.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::RankError { .. }
                | Error::ParseError(_)
                | Error::EmptySeries(_)
                | Error::DegenerateSeries(_)
                | Error::NoBalancedBlock(_)
                | Error::OrderCondition(_)
                | Error::MaskedInput(_)
                | Error::Io { .. }
        )
    }
}
