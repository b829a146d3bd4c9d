use thiserror::Error;

/// Errors raised across the simulation, deconvolution and unmixing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value or a pairing of inputs is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A segmentation does not form a disjoint cover of the footprint.
    #[error("partition violation at pixel {pixel}: {reason}")]
    PartitionViolation { pixel: usize, reason: String },

    /// A representation matrix breaks an equality constraint.
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),

    #[error("skewness undefined: {0}")]
    UndefinedSkewness(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
