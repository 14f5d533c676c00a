use std::path::Path;

use v2t_core::Error as CoreError;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Input,
    ArtifactMismatch,
    SchemaMismatch,
    Divergence,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        match self {
            ExitKind::Input => 2,
            ExitKind::ArtifactMismatch => 3,
            ExitKind::SchemaMismatch => 4,
            ExitKind::Divergence => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Input, message)
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self::new(ExitKind::ArtifactMismatch, message)
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::new(ExitKind::SchemaMismatch, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::input(format!("{}: {e}", path.display()))
    }
}

fn chain(e: &CoreError) -> String {
    let mut msg = e.to_string();
    let mut cur: &dyn std::error::Error = e;
    while let Some(next) = cur.source() {
        let s = next.to_string();
        if !msg.contains(&s) {
            msg.push_str(": ");
            msg.push_str(&s);
        }
        cur = next;
    }
    msg
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match e.root() {
            CoreError::Training { .. } => ExitKind::Divergence,
            CoreError::Shape(_) => ExitKind::ArtifactMismatch,
            _ => ExitKind::Input,
        };
        Self::new(kind, chain(&e))
    }
}

/// Treats any failure to read an existing artifact as a mismatch with what was expected.
pub fn artifact(e: CoreError) -> CliError {
    let mut c = CliError::from(e);
    if c.kind == ExitKind::Input {
        c.kind = ExitKind::ArtifactMismatch;
    }
    c
}
