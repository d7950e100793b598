//! Loss composition, Adam with warmup and decay, the training loop, run
//! directories with checkpoints and resume, and the multi-seed harness.

mod gradcheck;
mod loss;
mod optim;
mod run;
mod trainer;

pub use gradcheck::loss_gradient_check;
pub use loss::{point_loss, total_loss, LossConfig, LossTerms, PointIterations, PointLoss};
pub use optim::{Adam, Schedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use run::{
    config_hash, load_manifest, train_run, train_seeds, EvalRecord, RunManifest, RunOptions, StepRecord, SweepResult,
    RUN_FORMAT, RUN_VERSION,
};
pub(crate) use trainer::eval_noise;
pub use trainer::{evaluate, Counters, NonFiniteDump, StepLog, TrainConfig, Trainer};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::model::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss, aborting: {0}")]
    NonFinite(Box<NonFiniteDump>),
    #[error("cannot resume: {0}")]
    Incompatible(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}
