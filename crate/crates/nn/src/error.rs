use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate batch in {op}: batch statistics need at least 2 samples, got {got}")]
    DegenerateBatch { op: &'static str, got: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NnError::Dimension {
        op,
        detail: detail.into(),
    })
}
