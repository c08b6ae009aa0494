//! Staged training: single experts, joint adapter finetuning and dense baselines.

pub mod adamw;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod trainer;

pub use adamw::{adamw_step, adamw_update, lr_at, AdamW, Moments};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DenseInit, Stage, TrainConfig};
pub use export::export_text_hidden;
pub use trainer::{initial_model, targets_for, StepStats, Trainer};

use crate::model::container::ContainerError;
use crate::model::ModelError;
use crate::sim::SimError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {0}")]
    Diverged(u64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;
