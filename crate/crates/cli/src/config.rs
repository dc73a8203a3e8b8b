use std::fs;
use std::path::{Path, PathBuf};

use gst_core::experiment::BenchConfig;
use gst_core::kernel::CorrespondenceParams;
use gst_core::splat2d::FitConfig;
use gst_core::trainer::{SceneSpec, TrainConfig};
use serde::Deserialize;

/// `--config` file contents. Every section is optional; flags win over it.
/// `fit` stays `None` when absent so each subcommand can pick its own default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub fit: Option<FitConfig>,
    pub correspondence: CorrespondenceParams,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub scene: SceneSpec,
    pub threads: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gst_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("oracle {0} failed")]
    OracleFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use gst_core::Error as E;
        match self {
            CliError::OracleFailed(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Core(e) => match e {
                E::Io { .. }
                | E::MalformedImage(_)
                | E::UnsupportedBitDepth(_)
                | E::Parse(_)
                | E::BadMagic
                | E::UnsupportedVersion(_)
                | E::ChecksumMismatch { .. }
                | E::Truncated(_) => 2,
                E::InvalidConfig(_) => 3,
                E::PointOutOfBounds { .. }
                | E::ZeroMass
                | E::ShapeMismatch { .. }
                | E::InvalidInput(_)
                | E::EmptyDataset => 4,
                E::MissingKernel(_) => 5,
                E::Numerical(_) => 1,
            },
        }
    }
}
