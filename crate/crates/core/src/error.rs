use pathvid_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("no embedding for sentence {0:?}")]
    MissingEmbedding(String),
    #[error("integrity check failed for `{name}`: {detail}")]
    Integrity { name: String, detail: String },
    #[error("non-finite value at step {step}: {detail}")]
    NumericAbort { step: u64, detail: String },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("evaluation unreliable: {0}")]
    EvalUnreliable(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::NumericAbort { .. } | Error::Numeric(_) => 4,
            Error::EvalUnreliable(_) => 5,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io { context: context(), source })
    }
}
