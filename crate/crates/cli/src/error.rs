use std::path::PathBuf;

/// Exit code 2: the run never started. Exit code 1: a stage failed.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: trajflow::Error,
    },

    #[error("[{stage}] {path}: {message}")]
    Output {
        stage: &'static str,
        path: PathBuf,
        message: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } | CliError::Output { .. } => 1,
        }
    }

    pub(crate) fn output(stage: &'static str, path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        CliError::Output {
            stage,
            path: path.into(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tag a core error with the stage that raised it.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageExt<T> for trajflow::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
