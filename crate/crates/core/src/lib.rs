//! Beat: an ECG tokenizer that turns multi-lead recordings into discrete
//! dual-codebook token sequences.

pub mod error;
pub mod eval;
pub mod model;
pub mod preprocess;
pub mod quantizer;
pub mod signal_io;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{eval_model, run_ablation, score, EvalMetrics, EvalReport, Variant};
pub use model::{init_model, BeatConfig, BeatParams, LossBundle, TokenSequence};
pub use preprocess::{Segment, SegmentPair};
pub use quantizer::{Codebook, DvqResult, UsageStats};
pub use signal_io::EcgRecord;
pub use trainer::{train, AdamW, OptimizerState, TrainConfig, TrainHistory};
