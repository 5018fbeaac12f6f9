//! Preference-optimization objective and a toy policy to exercise it.

mod loss;
mod policy;
mod trainer;

use thiserror::Error;

pub use loss::{dpo_grad, dpo_loss, neg_log_sigmoid, sigmoid, DpoGrad, PolicyLogProbs};
pub use policy::{bin_of, bin_value, FeatureScope, FeatureSpec, ToyPolicy, NUM_BINS, NUM_SHAPES};
pub use trainer::{
    initial_policy, prepare, train_pairs, train_toy, DpoConfig, EpochStats, OptimizerKind, SkipCounts,
    TrainOutcome, TrainingPair, TrainingReport,
};

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("non_finite_input: log-probabilities must be finite")]
    NonFiniteInput,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty_dataset: no usable preference pairs")]
    EmptyDataset,
    #[error("non-finite loss or weights after epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
}
