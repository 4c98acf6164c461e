use std::path::PathBuf;

/// Errors produced anywhere in the pipeline core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// A gate selection that violates arity or names unknown candidates.
    #[error("invalid selection: {0}")]
    Selection(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("run {0} is locked by another writer")]
    Busy(String),

    #[error("search provider authentication failed: {0}")]
    ProviderAuth(String),

    #[error("insufficient yield: {0}")]
    InsufficientYield(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("interrupted")]
    Interrupted,

    #[error("corrupt manifest for run {run_id}: {message} (last valid checkpoint: {last_valid})")]
    CorruptManifest {
        run_id: String,
        message: String,
        last_valid: String,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("weights file error: {0}")]
    Weights(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's input rather than by the system.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFinite(_) | Error::Json(_) | Error::Interrupted | Error::CorruptManifest { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Adds the offending path to an `io::Result`.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
