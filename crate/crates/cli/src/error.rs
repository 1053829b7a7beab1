use std::path::Path;

use skillroute::analysis::AnalysisError;
use skillroute::environment::EnvError;
use skillroute::policy::PolicyError;
use skillroute::registry::RegistryError;
use skillroute::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("duplicate identifier {0:?}")]
    DuplicateId(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{0}")]
    Internal(String),
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::DuplicateId(id) => CliError::DuplicateId(id),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Internal(format!("csv: {e}"))
    }
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable name used in error records.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Schema(_) => "SchemaError",
            CliError::DuplicateId(_) => "DuplicateId",
            CliError::Io { .. } => "IoError",
            CliError::Policy(PolicyError::VersionMismatch { .. }) => "VersionMismatch",
            CliError::Policy(PolicyError::LayoutMismatch(_)) => "LayoutMismatch",
            CliError::Policy(_) => "PolicyError",
            CliError::Env(_) => "EnvError",
            CliError::Train(TrainError::Config(_)) => "ConfigError",
            CliError::Train(_) => "TrainError",
            CliError::Analysis(AnalysisError::NotAnExtension) => "NotAnExtension",
            CliError::Analysis(AnalysisError::NotNested) => "NotNested",
            CliError::Analysis(_) => "AnalysisError",
            CliError::Internal(_) => "InternalError",
        }
    }

    /// 1 for problems with the user's inputs, 2 for failures of our own.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) | CliError::Train(TrainError::MisalignedRecords(_)) => 2,
            CliError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }

    /// One-line JSON record written to stderr.
    pub fn record(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}
