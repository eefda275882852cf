use sgdsde_core::escape::EscapeError;
use sgdsde_core::linalg::LinalgError;
use sgdsde_core::problems::ProblemError;
use sgdsde_core::proxies::ProxyError;
use sgdsde_core::quadratic_analytics::QuadraticError;
use sgdsde_core::simulate::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, flags, data files. Exit code 2.
    #[error("validation error: {0}")]
    Validation(String),
    /// A computation failed or produced non-finite output. Exit code 3.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<QuadraticError> for CliError {
    fn from(e: QuadraticError) -> Self {
        match e {
            QuadraticError::SingularStepsize { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ProxyError> for CliError {
    fn from(e: ProxyError) -> Self {
        match e {
            ProxyError::Linalg(_) | ProxyError::Unmatchable { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            SimError::Proxy(p) => p.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EscapeError> for CliError {
    fn from(e: EscapeError) -> Self {
        match e {
            EscapeError::Invalid(_) | EscapeError::InsufficientPoints(_) => CliError::Validation(e.to_string()),
            EscapeError::Proxy(p) => p.into(),
            EscapeError::Sim(s) => s.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
