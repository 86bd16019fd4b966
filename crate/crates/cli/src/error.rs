use std::io;
use std::path::PathBuf;

use flcascade_core::data::DataError;
use flcascade_core::federation::FedError;
use flcascade_core::transport::WireError;
use flcascade_core::xai::XaiError;
use flcascade_core::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    WeightsFile {
        path: PathBuf,
        #[source]
        source: WireError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Xai(#[from] XaiError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
