use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// configuration problems (1), data problems (2), numerical divergence (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error{}: {msg}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Data { row: Option<usize>, msg: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            row: None,
            msg: msg.into(),
        }
    }

    pub fn data_at(row: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            row: Some(row),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the message with extra context (e.g. which group was being
    /// processed) while keeping the variant.
    pub fn with_context(self, context: &str) -> Self {
        match self {
            Error::Dimension(msg) => Error::Dimension(format!("{context}: {msg}")),
            Error::Config(msg) => Error::Config(format!("{context}: {msg}")),
            Error::Data { row, msg } => Error::Data {
                row,
                msg: format!("{context}: {msg}"),
            },
            Error::Numerical(msg) => Error::Numerical(format!("{context}: {msg}")),
            Error::State(msg) => Error::State(format!("{context}: {msg}")),
            io @ Error::Io { .. } => io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
