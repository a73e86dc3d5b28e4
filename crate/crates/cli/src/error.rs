use std::fmt;

use nlc_core::Error as CoreError;

/// Failure classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Io,
    Runtime,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Runtime => 1,
            Kind::Config => 2,
            Kind::Io => 3,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Io => "io",
            Kind::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Io,
            message: message.into(),
        }
    }

    /// One JSON object on one line, for standard error.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind.tag(), "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.tag(), self.message)
    }
}

/// Invalid parameters are configuration errors; unreadable, corrupt or
/// version-mismatched files are I/O errors; the rest happen mid-run.
impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Config(_) | CoreError::InvalidRange(_) => Kind::Config,
            CoreError::Io(_)
            | CoreError::Json(_)
            | CoreError::CorruptPayload(_)
            | CoreError::VersionMismatch { .. } => Kind::Io,
            _ => Kind::Runtime,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
