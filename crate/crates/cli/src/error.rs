use serde::Serialize;
use serde_json::json;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {}", .0.iter().map(|f| format!("{}: {}", f.field, f.message)).collect::<Vec<_>>().join("; "))]
    Config(Vec<FieldError>),

    #[error("numeric failure in seed {seed}: {message}")]
    Numeric { seed: u64, message: String },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Io { .. } => 1,
        }
    }

    /// One-line JSON report for stderr.
    pub fn report(&self) -> String {
        let v = match self {
            CliError::Config(fields) => json!({"status": "invalid-config", "errors": fields}),
            CliError::Numeric { seed, message } => {
                json!({"status": "numeric-failure", "seed": seed, "message": message})
            }
            CliError::Io { path, message } => json!({"status": "io-error", "path": path, "message": message}),
        };
        v.to_string()
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Classify a core error raised while running `seed`.
    pub fn from_core(seed: u64, e: &tvo_gpbandit::Error) -> Self {
        use tvo_gpbandit::Error as E;
        match e {
            E::Numeric { .. } | E::Domain(_) => CliError::Numeric {
                seed,
                message: e.to_string(),
            },
            E::InvalidArgument(_) | E::Capacity { .. } => {
                CliError::Config(vec![FieldError::new("<config>", format!("seed {seed}: {e}"))])
            }
        }
    }
}
