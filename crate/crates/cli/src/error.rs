use compiso_core::Error as CoreError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const VALIDATION: i32 = 3;
    pub const PHASE_ORDER: i32 = 4;
    pub const RUNTIME: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("phase order: {0}")]
    PhaseOrder(String),

    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Validation(_) => exit::VALIDATION,
            CliError::PhaseOrder(_) => exit::PHASE_ORDER,
            CliError::Runtime(_) => exit::RUNTIME,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidConfig(_)
            | CoreError::UnknownItem(_)
            | CoreError::InvalidWindow { .. }
            | CoreError::InvalidPartition(_)
            | CoreError::InvalidInput(_)
            | CoreError::PanelMismatch(_)
            | CoreError::Schema { .. }
            | CoreError::Csv(_)
            | CoreError::Json(_) => CliError::Validation(msg),
            CoreError::MissingRequestLog => CliError::PhaseOrder(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
