use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config file not found: {}", .0.display())]
    ConfigNotFound(PathBuf),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable, machine-parsable category used at the CLI boundary.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Argument(_) => "invalid-argument",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config-invalid",
            Error::ConfigNotFound(_) => "config-not-found",
            Error::Shape(_) => "shape-mismatch",
            Error::Consistency(_) => "consistency",
            Error::Divergence(_) => "training-divergence",
            Error::Checkpoint(_) => "corrupt-checkpoint",
            Error::Missing(_) => "missing-artifact",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image-codec",
            Error::Serde(_) => "serialization",
        }
    }

    /// Whether the failure stems from configuration validation (CLI exit code 3).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::ConfigNotFound(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
