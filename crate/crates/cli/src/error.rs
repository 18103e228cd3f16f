use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: String, reason: String },

    #[error(transparent)]
    Model(eqfree::Error),
}

impl From<eqfree::Error> for CliError {
    fn from(e: eqfree::Error) -> Self {
        match e {
            eqfree::Error::InvalidParameter { name, reason } => CliError::Invalid {
                key: name.to_string(),
                reason,
            },
            other => CliError::Model(other),
        }
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Invalid { .. } => "invalid",
            CliError::Model(_) => "model",
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Invalid { .. } => 2,
            _ => 1,
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut detail = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::Parse { line, .. } => detail["line"] = json!(line),
            CliError::Invalid { key, .. } => detail["key"] = json!(key),
            CliError::Io { path, .. } => detail["path"] = json!(path.display().to_string()),
            CliError::Model(_) => {}
        }
        json!({ "error": detail })
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
