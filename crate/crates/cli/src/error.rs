use std::fmt;
use std::path::Path;

use labelshift_core::Error as CoreError;
use serde_json::{json, Value};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Input,
    Identifiability,
    Convergence,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Input => 2,
            Kind::Identifiability => 3,
            Kind::Convergence => 4,
            Kind::Io => 5,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Kind::Input => "input",
            Kind::Identifiability => "identifiability",
            Kind::Convergence => "convergence",
            Kind::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
    pub details: Option<Value>,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), details: None }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(Kind::Input, message)
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::new(Kind::Io, format!("{}: {err}", path.display()))
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    /// Prefixes the message with where the error happened.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn to_json(&self) -> Value {
        json!({
            "error": {
                "kind": self.kind.name(),
                "exit_code": self.kind.exit_code(),
                "message": self.message,
                "details": self.details,
            }
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        let kind = match err {
            CoreError::NotIdentifiable { .. } => Kind::Identifiability,
            CoreError::NonConvergence { .. } => Kind::Convergence,
            _ => Kind::Input,
        };
        Self::new(kind, err.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let code = |e: CoreError| CliError::from(e).kind.exit_code();
        assert_eq!(code(CoreError::NotIdentifiable { condition: 1e13 }), 3);
        assert_eq!(code(CoreError::NonConvergence { iterations: 5, residual: 1.0 }), 4);
        assert_eq!(code(CoreError::EmptyInput("x")), 2);
    }

    #[test]
    fn error_json_is_machine_readable() {
        let v = CliError::input("bad").with_details(json!({"row": 3})).to_json();
        assert_eq!(v["error"]["kind"], "input");
        assert_eq!(v["error"]["exit_code"], 2);
        assert_eq!(v["error"]["details"]["row"], 3);
    }
}
