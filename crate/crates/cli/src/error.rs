use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Toml { path: String, message: String },
    #[error("invalid config key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: kolmo_core::Error,
    },
    #[error("serialising report: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit code: 2 for configuration problems, 3 for failures
    /// while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Toml { .. } | CliError::Invalid { .. } => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches context to core errors.
pub trait Context<T> {
    fn context(self, what: &str) -> Result<T>;
}

impl<T> Context<T> for kolmo_core::Result<T> {
    fn context(self, what: &str) -> Result<T> {
        self.map_err(|source| CliError::Core {
            context: what.to_string(),
            source,
        })
    }
}
