//! Flag groups and the merged `key=value` view of one invocation.
//!
//! Precedence is defaults, then the `--config` file, then flags. Every flag
//! except `--config` can also be set from the file under its long name.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use beat_core::model::BeatConfig;
use beat_core::preprocess::PreprocessConfig;
use beat_core::trainer::{AdamW, TrainConfig};

/// Bad command line or config file; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

macro_rules! flag_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident : $ty:ty = $key:literal, $help:literal;)* }) => {
        $(#[$meta])*
        #[derive(clap::Args, Debug, Clone, Default)]
        pub struct $name {
            $(
                #[arg(long = $key, help = $help)]
                pub $field: Option<$ty>,
            )*
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
                vec![$(($key, self.$field.as_ref().map(|v| v.to_string()))),*]
            }
        }
    };
}

flag_group! {
    /// Flags shared by every subcommand.
    CommonArgs {
        seed: u64 = "seed", "Seed for every random choice";
        threads: usize = "threads", "Worker threads (default 1)";
    }
}

flag_group! {
    /// Model architecture and loss weights.
    ModelArgs {
        context_len: usize = "context-len", "Context samples T";
        leads: usize = "leads", "Leads C";
        patch: usize = "patch", "Patch size f";
        dim: usize = "dim", "Embedding width c";
        queries: usize = "queries", "Learnable queries m";
        enc_layers: usize = "enc-layers", "Encoder blocks";
        dec_layers: usize = "dec-layers", "Decoder blocks";
        heads: usize = "heads", "Attention heads";
        ffn_mult: usize = "ffn-mult", "Feed-forward width multiplier";
        k1: usize = "k1", "Core codebook size";
        k2: usize = "k2", "Residual codebook size";
        levels: usize = "levels", "Quantization levels (1 or 2)";
        pred_len: usize = "pred-len", "Prediction length P";
        beta: f64 = "beta", "Commitment weight";
        lambda_recon: f64 = "lambda-recon", "Reconstruction loss weight";
        lambda_pred: f64 = "lambda-pred", "Prediction loss weight";
        lambda_vq: f64 = "lambda-vq", "Quantization loss weight";
        pred_from_quantized: bool = "pred-from-quantized", "Predict from quantized queries (true/false)";
    }
}

flag_group! {
    /// Optimizer and schedule.
    TrainArgs {
        epochs: usize = "epochs", "Training epochs";
        batch_size: usize = "batch-size", "Pairs per update";
        lr: f64 = "lr", "Peak learning rate";
        min_lr: f64 = "min-lr", "Final learning rate of the cosine schedule";
        weight_decay: f64 = "weight-decay", "Decoupled weight decay";
        clip_norm: f64 = "clip-norm", "Global gradient-norm clip, 0 disables";
        dead_code_reinit: bool = "dead-code-reinit", "Reseed unused codes each epoch (true/false)";
    }
}

flag_group! {
    /// Resampling, filtering and windowing.
    PrepArgs {
        notch: f64 = "notch", "Mains notch frequency in Hz, 0 disables";
        target_fs: f64 = "target-fs", "Output sampling rate";
        segment_len: usize = "segment-len", "Context window length";
        pred_len: usize = "pred-len", "Future window length";
    }
}

pub const MODEL_KEYS: &[&str] = ModelArgs::KEYS;

/// Merged settings of one subcommand.
#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_file(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    pub fn merge(
        allowed: &[&str],
        file: Option<&Path>,
        flags: Vec<(&'static str, Option<String>)>,
    ) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_config_file(&text)? {
                if !allowed.contains(&k.as_str()) {
                    return Err(usage(format!("unknown config key {k:?} in {}", path.display())));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("bad value {v:?} for {key}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> anyhow::Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> anyhow::Result<T> {
        self.get(key)?.ok_or_else(|| usage(format!("missing required --{key}")))
    }

    pub fn path(&self, key: &str) -> anyhow::Result<Option<PathBuf>> {
        self.get(key)
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.get_or("seed", 0)
    }

    pub fn threads(&self) -> anyhow::Result<usize> {
        self.get_or("threads", 1)
    }

    pub fn model_config(&self) -> anyhow::Result<BeatConfig> {
        let mut cfg = BeatConfig::default();
        for key in MODEL_KEYS {
            if let Some(v) = self.values.get(*key) {
                cfg.set(key, v).map_err(|e| usage(e.to_string()))?;
            }
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let d = TrainConfig::default();
        let clip: f64 = self.get_or("clip-norm", d.clip_norm.unwrap_or(0.0))?;
        Ok(TrainConfig {
            epochs: self.get_or("epochs", d.epochs)?,
            batch_size: self.get_or("batch-size", d.batch_size)?,
            optimizer: AdamW {
                lr: self.get_or("lr", d.optimizer.lr)?,
                weight_decay: self.get_or("weight-decay", d.optimizer.weight_decay)?,
                ..d.optimizer
            },
            min_lr: self.get_or("min-lr", d.min_lr)?,
            clip_norm: (clip > 0.0).then_some(clip),
            dead_code_reinit: self.get_or("dead-code-reinit", d.dead_code_reinit)?,
            seed: self.seed()?,
            threads: self.threads()?,
        })
    }

    pub fn prep_config(&self) -> anyhow::Result<PreprocessConfig> {
        let d = PreprocessConfig::default();
        Ok(PreprocessConfig {
            target_fs: self.get_or("target-fs", d.target_fs)?,
            segment_len: self.get_or("segment-len", d.segment_len)?,
            pred_len: self.get_or("pred-len", d.pred_len)?,
            notch_hz: self.get_or("notch", d.notch_hz)?,
        })
    }
}
