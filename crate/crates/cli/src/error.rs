use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing artifact {}: run `{stage}` first", path.display())]
    Missing { path: PathBuf, stage: &'static str },
    #[error("stale artifact {} (fingerprint mismatch): rerun `{stage}` to rebuild it", path.display())]
    Stale { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Core(#[from] curriculum_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(curriculum_core::Error::Config(_)) => 2,
            CliError::Missing { .. } | CliError::Stale { .. } => 3,
            CliError::Core(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "dependency",
            _ => "data",
        }
    }

    /// One-line JSON description for machine consumers.
    pub fn json_line(&self) -> String {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Missing { path, stage } | CliError::Stale { path, stage } = self {
            v["artifact"] = path.display().to_string().into();
            v["stage"] = (*stage).into();
        }
        v.to_string()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
