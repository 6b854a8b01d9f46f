//! Experiment harness around the core library: run configuration,
//! subcommand drivers, binary checkpoints, and metrics emission.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod outputs;

use ildr_core::CoreError;

/// CLI failure classes, mapped to exit codes: user errors exit 1, runtime
/// failures exit 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CliErrorKind {
    User,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: CliErrorKind,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        Self {
            kind: CliErrorKind::User,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: CliErrorKind::Runtime,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            CliErrorKind::User => 1,
            CliErrorKind::Runtime => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        let kind = match &err {
            CoreError::InvalidArgument(_) | CoreError::Config(_) | CoreError::Format { .. } => {
                CliErrorKind::User
            }
            CoreError::Diverged { .. }
            | CoreError::Decomposition(_)
            | CoreError::NotPositiveDefinite { .. }
            | CoreError::Io(_) => CliErrorKind::Runtime,
        };
        Self {
            kind,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        Self::runtime(err.to_string())
    }
}
