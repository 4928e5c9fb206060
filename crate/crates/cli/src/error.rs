use tilted_core::lookahead::PoolError;

/// Every failure the CLI reports. Each kind has its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    PoolParse(String),
    #[error("{0}")]
    PoolInvalid(String),
    #[error("{0}")]
    Verify(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::PoolParse(_) => "pool-parse",
            CliError::PoolInvalid(_) => "pool-invalid",
            CliError::Verify(_) => "verify",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::PoolParse(_) => 5,
            CliError::PoolInvalid(_) => 6,
            CliError::Verify(_) => 7,
            CliError::Runtime(_) => 8,
        }
    }

    /// `error[kind]: message` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error[{}]: {msg}", self.kind())
    }
}

impl From<PoolError> for CliError {
    fn from(e: PoolError) -> Self {
        match e {
            PoolError::Io { .. } => CliError::Io(e.to_string()),
            PoolError::Parse(_) => CliError::PoolParse(e.to_string()),
            PoolError::Validation(_) | PoolError::DimensionMismatch { .. } => {
                CliError::PoolInvalid(e.to_string())
            }
        }
    }
}

impl From<tilted_core::Error> for CliError {
    fn from(e: tilted_core::Error) -> Self {
        use tilted_core::Error as E;
        match e {
            E::Config(_)
            | E::Argument(_)
            | E::UnsupportedReward(_)
            | E::UnsupportedDimension(_) => CliError::Config(e.to_string()),
            E::Domain(_) => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
