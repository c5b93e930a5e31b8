#![allow(dead_code)]

use beat_core::model::BeatConfig;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> BeatConfig {
    BeatConfig {
        context_len: 20,
        leads: 1,
        patch: 5,
        dim: 8,
        queries: 2,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn_mult: 2,
        k1: 4,
        k2: 4,
        levels: 2,
        pred_len: 10,
        ..BeatConfig::default()
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}
