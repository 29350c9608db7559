//! Fairness-aware training of factorization models.

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

mod adam;
mod grid;
mod loss;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use grid::{grid_search, AccuracyCriterion, FairnessCriterion, GridOutcome, GridRow, GridSpec};
pub use loss::{
    accumulate_loss, accumulate_poisson, loss_gradient, mse_loss, parity_penalty, total_loss, BatchEntry, Kappa,
    LossBreakdown, LossConfig, LossVariant, PenaltyValue, MIN_WITHIN_VARIATION,
};
pub use trainer::{batch_entries, train_mf, train_model, train_poisson, EpochRecord, ModelSpec, TrainConfig, TrainHistory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("training split is empty")]
    EmptyTrain,
    #[error("loss became non-finite in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}
