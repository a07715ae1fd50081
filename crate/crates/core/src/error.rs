use thiserror::Error;

/// Errors raised across the crate. Variants map onto the CLI exit-code
/// convention through [`GawmError::exit_code`].
#[derive(Debug, Error)]
pub enum GawmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("lifecycle error: {0}")]
    Lifecycle(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("incompatible artifact: {0}")]
    Incompatible(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T, E = GawmError> = std::result::Result<T, E>;

impl GawmError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GawmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 0 success, 2 usage/config, 3 artifact incompatibility, 1 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            GawmError::Config(_) | GawmError::Input(_) | GawmError::Format(_) => 2,
            GawmError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            GawmError::Incompatible(_) => 3,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for GawmError {
    fn from(e: serde_json::Error) -> Self {
        GawmError::Format(e.to_string())
    }
}

impl From<csv::Error> for GawmError {
    fn from(e: csv::Error) -> Self {
        GawmError::Format(e.to_string())
    }
}
