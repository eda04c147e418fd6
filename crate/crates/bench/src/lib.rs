//! Shared fixtures for the criterion benches.

use mergelab::model::{ModelConfig, TransformerModel};
use mergelab::numerics::{seeded, Tensor};

/// Acceptance-scale model shape.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 2,
        d_model: 32,
        d_mlp: 128,
        vocab_size: 64,
        context_length: 32,
        seed: 7,
    }
}

pub fn model(config: ModelConfig) -> TransformerModel {
    TransformerModel::new(config).expect("valid bench config")
}

/// `batch` rows of `context_length` pseudo-random token ids.
pub fn tokens(config: &ModelConfig, batch: usize) -> Vec<usize> {
    (0..batch * config.context_length)
        .map(|i| (i * 31 + i / 7) % config.vocab_size)
        .collect()
}

pub fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut seeded(seed, "bench"))
}
