use crate::dataio::DataError;
use crate::diffmath::MathError;

/// Failures of the training loops.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no training pairs could be formed")]
    EmptyPairing,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TrainError {
    /// Maps a math error raised inside epoch `epoch` to the training error
    /// callers act on: any non-finite value is reported with its epoch.
    pub(crate) fn at_epoch(epoch: usize) -> impl Fn(MathError) -> TrainError {
        move |e| match e {
            MathError::NonFinite { .. } | MathError::NonFiniteLoss => {
                TrainError::NonFiniteLoss { epoch }
            }
            other => TrainError::Math(other),
        }
    }
}
