use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,

    /// A named precondition on an input parameter does not hold.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("moment order exceeds 1+log p (m = {m}, limit = {limit})")]
    MomentOrder { m: f64, limit: f64 },

    #[error("truncated moment diverges (m = {m} >= 2s = {two_s})")]
    TruncatedMomentDiverges { m: f64, two_s: f64 },

    #[error("usage: {0}")]
    Usage(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown density `{0}`")]
    UnknownDensity(String),

    #[error("exact moments unavailable for this population")]
    ExactMomentsUnavailable,

    #[error("conditional variance decomposition unavailable for this population")]
    DecompositionUnavailable,

    #[error("missing distances for anchor `{0}`")]
    MissingDistances(&'static str),

    /// A bound was requested on a problem that does not meet its preconditions.
    #[error("bound `{bound}` incompatible with problem: {precondition}")]
    Incompatible { bound: String, precondition: String },

    #[error("function check failed: {0}")]
    ShapeCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_)) || matches!(self, Error::Csv(e) if e.is_io_error())
    }
}

/// Fails with [`Error::InvalidParameter`] unless `cond` holds.
pub(crate) fn ensure(cond: bool, name: &'static str, reason: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(name, reason))
    }
}
