//! The tokenizer network: patch encoder with learnable queries, dual
//! codebook bottleneck, masked reconstruction decoder and prediction head.

pub mod checkpoint;
pub mod config;
mod forward;
pub mod gradcheck;
pub mod nn;
mod params;
pub mod tokens;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::BeatConfig;
pub use forward::{
    backward, decode_recon, decoder_mask, encode, forward, forward_losses, loss_and_grad, predict_future,
    quantize, ActivationCache, LossBundle, QuantMode,
};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use params::{init_model, sinusoidal_positions, BeatParams};
pub use tokens::{decode_tokens, parse_tokens, serialize_tokens, tokenize, Code, TokenSequence};
