use std::path::PathBuf;

use delusim_core::features::FeatureError;
use delusim_core::{AnalysisError, CorpusError, MatchError, ScorerError, SimulateError, ThemeError};
use thiserror::Error;

/// Every failure the CLI can report, each mapped onto a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs `{missing}`: {reason}; run `delusim {missing} --config <run.toml>` first")]
    Dependency { stage: String, missing: String, reason: String },
    #[error("provider failure: {0}")]
    Provider(String),
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Provider(_) => 4,
            CliError::Analysis(_) => 5,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Transport { .. } | FeatureError::Protocol(_) => CliError::Provider(e.to_string()),
            FeatureError::NoPosts(_) => CliError::Analysis(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ScorerError> for CliError {
    fn from(e: ScorerError) -> Self {
        match e {
            ScorerError::Features(f) => f.into(),
            ScorerError::FingerprintMismatch { .. } | ScorerError::Dimension { .. } | ScorerError::Corpus { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Analysis(e.to_string()),
        }
    }
}

impl From<SimulateError> for CliError {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::Transport(_) => CliError::Provider(e.to_string()),
            SimulateError::Scorer(s) => s.into(),
            SimulateError::Config(_) | SimulateError::MockScript(_) | SimulateError::Template(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Analysis(e.to_string()),
        }
    }
}

impl From<MatchError> for CliError {
    fn from(e: MatchError) -> Self {
        CliError::Analysis(format!("matching: {e}"))
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::Analysis(e.to_string())
    }
}

impl From<ThemeError> for CliError {
    fn from(e: ThemeError) -> Self {
        CliError::Analysis(format!("themes: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Analysis(format!("csv: {e}"))
    }
}
