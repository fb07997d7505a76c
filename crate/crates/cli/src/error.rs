use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::json;

/// Failure of a subcommand. Usage and input problems exit with 2, anything
/// that goes wrong after the inputs were accepted exits with 1.
#[derive(Debug)]
pub enum CliError {
    InputNotFound(PathBuf),
    InvalidInput { path: PathBuf, message: String },
    Usage(String),
    Compute(String),
}

impl CliError {
    pub fn usage(e: impl fmt::Display) -> Self {
        Self::Usage(e.to_string())
    }

    pub fn compute(e: impl fmt::Display) -> Self {
        Self::Compute(e.to_string())
    }

    pub fn invalid_input(path: &Path, e: impl fmt::Display) -> Self {
        Self::InvalidInput {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Compute(_) => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Self::InputNotFound(p) => json!({ "error": "input not found", "path": p }),
            Self::InvalidInput { path, message } => {
                json!({ "error": "invalid input", "path": path, "message": message })
            }
            Self::Usage(m) => json!({ "error": "invalid usage", "message": m }),
            Self::Compute(m) => json!({ "error": "computation failed", "message": m }),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

/// Fails with `InputNotFound` unless `path` exists.
pub fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::InputNotFound(path.to_path_buf()))
    }
}
