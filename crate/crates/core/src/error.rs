use thiserror::Error;

use crate::fusion::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible layout: {0}")]
    InfeasibleLayout(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(Violation),

    #[error("no valid neighbor found after {0} swap attempts")]
    FrozenState(usize),

    #[error("instance too large for exhaustive search: {subtasks} subtasks (limit {limit})")]
    TooLarge { subtasks: usize, limit: usize },

    #[error("no feasible parallel strategy: {0}")]
    NoFeasibleStrategy(String),

    #[error("malformed input: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<Violation> for Error {
    fn from(v: Violation) -> Self {
        Error::InvalidSchedule(v)
    }
}
