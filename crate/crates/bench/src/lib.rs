//! Fixtures shared by the benchmarks.

use beat_core::model::BeatConfig;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-lead, 500-sample model small enough to train on a laptop.
pub fn desk_config() -> BeatConfig {
    BeatConfig {
        leads: 2,
        dim: 32,
        queries: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 4,
        ffn_mult: 2,
        k1: 128,
        k2: 128,
        ..BeatConfig::default()
    }
}

pub fn uniform(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}
