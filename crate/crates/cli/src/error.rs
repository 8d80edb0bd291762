use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] unlearn_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} verification criteria failed")]
    Verify { failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use unlearn_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::InvalidConfig(_) | E::InvalidBatch { .. } | E::Parse { .. }) => 2,
            CliError::Verify { .. } => 1,
            CliError::Core(_) | CliError::Io { .. } => 3,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
