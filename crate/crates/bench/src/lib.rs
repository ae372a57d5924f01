//! Input builders shared by the benchmarks.

use foldlm_core::{Mat, ModelConfig, RngState};

/// Seeded `rows x cols` standard-normal matrix.
pub fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    RngState::new(seed).gaussian_mat(rows, cols)
}

/// The desk-scale model shape.
pub fn desk_model() -> ModelConfig {
    ModelConfig::default()
}

/// `count` random byte windows of `len` tokens.
pub fn random_windows(count: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = RngState::new(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.below(256)).collect())
        .collect()
}
