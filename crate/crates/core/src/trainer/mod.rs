//! Staged training: configuration, optimizer, checkpoints and the epoch loop.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, RetrievalConfig, Stage, StageEpochs, StageRates, TrainConfig};
pub use optim::{clip_global_norm, global_norm, Adam, AdamMoments};
pub use train::{
    batch_objective, train_stage, BatchItem, BatchLosses, EpochRecord, MetricHistory, StageOutcome, Trainer,
};
