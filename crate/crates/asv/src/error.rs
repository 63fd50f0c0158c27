use thiserror::Error;

/// Crate-wide error type. Every fallible public operation returns one of
/// these; the CLI prints the `Display` form as its one-line diagnostic.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("empty sentence: {0}")]
    EmptySentence(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
