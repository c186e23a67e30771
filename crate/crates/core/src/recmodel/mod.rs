//! Toy sequential recommender used as the compression target.

mod data;
mod model;
mod train;

use thiserror::Error;

pub use data::{
    cluster_of, format_dataset, generate_synthetic, load_dataset, parse_dataset, save_dataset,
    split_leave_last_two, DataError, EvalCase, ItemSequenceDataset, Split, UserSequence,
    CLUSTER_SIZE,
};
pub use model::{Block, FactorPair, LayerId, LayerNorm, Linear, LinearSlot, ModelConfig, RecModel};
pub use train::{dataset_loss, train, train_with_callback, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecError {
    #[error("item id {item} outside [0, {num_items})")]
    InvalidItemId { item: usize, num_items: usize },
    #[error("context is empty")]
    EmptyContext,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {0} is factored; only dense models can be trained")]
    NotTrainable(LayerId),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    DivergenceDetected {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
}
