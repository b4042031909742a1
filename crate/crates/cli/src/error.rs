use std::path::PathBuf;

use thiserror::Error;
use twn::data::DataError;
use twn::kernels::KernelError;
use twn::nn::NnError;
use twn::packfmt::PackError;
use twn::quantizer::QuantError;
use twn::trainer::TrainError;

use crate::config::ConfigError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config or unusable input files.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: Box<dyn std::error::Error + Send + Sync> },
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn input(path: impl Into<PathBuf>, source: impl std::error::Error + Send + Sync + 'static) -> Self {
        CliError::Input {
            path: path.into(),
            source: Box::new(source),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Input { .. } => EXIT_USAGE,
            // anything wrong with the dataset on disk is the caller's to fix
            CliError::Data(_) => EXIT_USAGE,
            CliError::Train(TrainError::InvalidConfig(_) | TrainError::DatasetMismatch(_)) => EXIT_USAGE,
            CliError::Nn(NnError::Invalid(_) | NnError::Shape(_) | NnError::LabelOutOfRange { .. }) => EXIT_USAGE,
            CliError::Quant(QuantError::Tensor(_) | QuantError::UnsupportedStates(_)) => EXIT_INTERNAL,
            CliError::Quant(_) => EXIT_USAGE,
            CliError::Kernel(_) => EXIT_USAGE,
            _ => EXIT_INTERNAL,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
