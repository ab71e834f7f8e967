use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Infeasible(_) => "infeasible",
            CliError::Internal(_) => "internal",
        }
    }
}

impl From<fuseplan::Error> for CliError {
    fn from(e: fuseplan::Error) -> Self {
        use fuseplan::Error as E;
        match e {
            E::InvalidArgument(_) | E::Malformed(_) | E::TooLarge { .. } => CliError::Config(e.to_string()),
            E::InfeasibleLayout(_) | E::NoFeasibleStrategy(_) => CliError::Infeasible(e.to_string()),
            E::InvalidSchedule(_) | E::FrozenState(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
