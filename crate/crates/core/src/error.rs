use std::path::PathBuf;

use crate::autodiff::TensorError;
use crate::episodes::EpisodeError;
use crate::graph::GraphError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error. Configuration problems are kept apart from runtime
/// failures so the CLI can map them onto distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at episode {episode}: {reason}")]
    Divergence { episode: usize, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by user input rather than by a run failing.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Graph(_) | Error::Json { .. } | Error::Episode(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
