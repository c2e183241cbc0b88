use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage an error surfaced in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Render,
    Edges,
    Session,
    Sample,
    Decode,
    Output,
    Evaluate,
    AttnDump,
    Serve,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Render => "render",
            Stage::Edges => "edges",
            Stage::Session => "session",
            Stage::Sample => "sample",
            Stage::Decode => "decode",
            Stage::Output => "output",
            Stage::Evaluate => "evaluate",
            Stage::AttnDump => "attn-dump",
            Stage::Serve => "serve",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync + 'static>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BoxError,
    },
    /// Bad input caught by a stage before any backend work.
    #[error("{stage}: {message}")]
    Input { stage: Stage, message: String },
    #[error("evaluate: {0}")]
    Eval(String),
    #[error("{stage}: {}: {source}", path.display())]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: BoxError,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn input(stage: Stage, message: impl ToString) -> Self {
        CliError::Input {
            stage,
            message: message.to_string(),
        }
    }

    pub fn backend(stage: Stage, source: impl Into<BoxError>) -> Self {
        CliError::Backend {
            stage,
            source: source.into(),
        }
    }

    pub fn io(stage: Stage, path: impl Into<PathBuf>, source: impl Into<BoxError>) -> Self {
        CliError::Io {
            stage,
            path: path.into(),
            source: source.into(),
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            CliError::Config(_) => Stage::Config,
            CliError::Eval(_) => Stage::Evaluate,
            CliError::Input { stage, .. } | CliError::Backend { stage, .. } | CliError::Io { stage, .. } => *stage,
        }
    }

    /// 2 for configuration problems, 3 for backend and protocol failures,
    /// 4 for evaluation failures, 1 for local file errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input { .. } => 2,
            CliError::Backend { .. } => 3,
            CliError::Eval(_) => 4,
            CliError::Io { .. } => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
