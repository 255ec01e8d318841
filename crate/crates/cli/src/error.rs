use std::fmt;
use std::path::PathBuf;

/// Pipeline stage named in errors and timing logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    LoadImage,
    LoadLandmarks,
    LoadModel,
    Fit,
    Synthesize,
    Transfer,
    Rasterize,
    Blend,
    WriteOutput,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::LoadImage => "load-image",
            Stage::LoadLandmarks => "load-landmarks",
            Stage::LoadModel => "load-model",
            Stage::Fit => "fit",
            Stage::Synthesize => "synthesize",
            Stage::Transfer => "transfer",
            Stage::Rasterize => "rasterize",
            Stage::Blend => "blend",
            Stage::WriteOutput => "write-output",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] affectsynth::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: affectsynth::Error,
    },
    #[error("invalid {field}: {message}")]
    Field { field: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Gallery(String),
    #[error("no neutral frames: {0}")]
    NoNeutralFrames(String),
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn field(field: &str, message: impl Into<String>) -> Self {
        CliError::Field {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            CliError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Tags a core failure with the stage it happened in.
pub trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T> AtStage<T> for std::result::Result<T, affectsynth::Error> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
