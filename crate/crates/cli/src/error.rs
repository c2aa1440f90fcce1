use std::fmt;
use std::path::Path;

use relabel_core::ErrorKind;

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl fmt::Display) -> Self {
        CliError { kind: ExitKind::Usage, message: message.to_string() }
    }

    pub fn data(message: impl fmt::Display) -> Self {
        CliError { kind: ExitKind::Data, message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }

    /// Prefixes the message, keeping the exit kind.
    pub fn context(self, what: impl fmt::Display) -> Self {
        CliError { kind: self.kind, message: format!("{what}: {}", self.message) }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::data(format!("{}: {err}", path.display()))
    }
}

impl From<relabel_core::Error> for CliError {
    fn from(e: relabel_core::Error) -> Self {
        let kind = match e.kind() {
            ErrorKind::Config => ExitKind::Usage,
            ErrorKind::Data => ExitKind::Data,
            ErrorKind::Numeric => ExitKind::Numeric,
        };
        CliError { kind, message: e.to_string() }
    }
}

pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for std::result::Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| e.into().context(what))
    }
}
