use std::io;
use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] milsurv_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Usage(String),
    /// A verification command completed but found failures.
    #[error("{0}")]
    Check(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Csv { path, source }
    }

    pub fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Json { path, source }
    }

    /// 1 for rejected input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Csv { .. } | CliError::Json { .. } | CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                milsurv_core::Error::Dimension { .. } => "dimension",
                milsurv_core::Error::Config(_) => "config",
                milsurv_core::Error::Contract(_) => "contract",
                milsurv_core::Error::EmptyBag => "empty_bag",
                milsurv_core::Error::Corrupt(_) => "corrupt",
                milsurv_core::Error::Registry { .. } => "registry",
                milsurv_core::Error::Alignment { .. } => "alignment",
                milsurv_core::Error::Ingestion(_) => "ingestion",
                milsurv_core::Error::DegenerateCohort(_) => "degenerate_cohort",
                milsurv_core::Error::UndefinedMetric => "undefined_metric",
                milsurv_core::Error::NonFinite { .. } => "non_finite",
            },
            CliError::Io { .. } => "io",
            CliError::Csv { .. } => "csv",
            CliError::Json { .. } => "json",
            CliError::Usage(_) => "usage",
            CliError::Check(_) => "check_failed",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() }).to_string()
    }
}
