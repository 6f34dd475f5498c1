use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid data: {0}")]
    Validation(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("user vocabulary is empty at threshold {threshold}")]
    EmptyVocabulary { threshold: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("embedding rows not aligned with corpus: {0}")]
    Alignment(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("normal matrix is singular; refit with a ridge weight lambda > 0")]
    Singular,
    #[error("training failed: {0}")]
    Training(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Singular | Error::Training(_) | Error::Numerical(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
