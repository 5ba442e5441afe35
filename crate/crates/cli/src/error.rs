use std::path::PathBuf;

use thiserror::Error;
use uqkit::ErrorKind;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: uqkit::Error,
    },

    #[error("{stage}: missing input {}; run `uqkit {needs}` first", path.display())]
    MissingInput {
        stage: String,
        path: PathBuf,
        needs: &'static str,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("output directory {} is in use (lock file {} exists)", dir.display(), dir.join(".lock").display())]
    Locked { dir: PathBuf },

    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Invalid(_) => 2,
            CliError::Stage { source, .. } => match source.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
            CliError::MissingInput { .. } | CliError::Io { .. } | CliError::Locked { .. } => 3,
            CliError::Verify(_) => 4,
        }
    }
}

/// Attach a stage name to core errors.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageContext<T> for uqkit::Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|source| CliError::Stage {
            stage: stage.to_string(),
            source,
        })
    }
}

impl<T> StageContext<T> for std::result::Result<T, csv::Error> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| CliError::Stage {
            stage: stage.to_string(),
            source: uqkit::Error::from(e),
        })
    }
}
