use thiserror::Error;

/// Failures of a command, each with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) | CliError::Other(m) => m,
        }
    }

    /// Error raised while reading or preparing input data.
    pub fn data(e: gibbs_core::Error) -> Self {
        match e {
            gibbs_core::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<gibbs_core::Error> for CliError {
    fn from(e: gibbs_core::Error) -> Self {
        match e {
            gibbs_core::Error::Numeric(m) => CliError::Numeric(m),
            e @ (gibbs_core::Error::Io(_) | gibbs_core::Error::Parse { .. }) => CliError::Data(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("json error: {e}"))
    }
}
