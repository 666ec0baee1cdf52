use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Verification(_) => 3,
            HarnessError::Numeric(_) | HarnessError::Io { .. } => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Verification(_) => "verification",
            HarnessError::Numeric(_) => "numeric",
            HarnessError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<dacctl_core::Error> for HarnessError {
    fn from(e: dacctl_core::Error) -> Self {
        HarnessError::Numeric(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Maps a core error raised while building from config to a config error.
pub(crate) fn config_err(context: &str) -> impl FnOnce(dacctl_core::Error) -> HarnessError + '_ {
    move |e| HarnessError::Config(format!("{context}: {e}"))
}
