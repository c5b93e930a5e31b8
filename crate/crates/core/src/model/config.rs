use crate::error::{Error, Result};
use crate::quantizer::DEFAULT_BETA;

/// Architecture and loss hyperparameters of the tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatConfig {
    /// Context samples `T`.
    pub context_len: usize,
    /// Leads `C`.
    pub leads: usize,
    /// Patch frame size `f`.
    pub patch: usize,
    /// Embedding width `c`.
    pub dim: usize,
    /// Learnable query count `m`.
    pub queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub k1: usize,
    pub k2: usize,
    /// 1 (core only) or 2 (core + residual).
    pub levels: usize,
    /// Prediction length `P`.
    pub pred_len: usize,
    pub beta: f64,
    pub lambda_recon: f64,
    pub lambda_pred: f64,
    pub lambda_vq: f64,
    /// Feed the prediction head quantized (true) or pre-quantization queries.
    pub pred_from_quantized: bool,
}

impl Default for BeatConfig {
    fn default() -> Self {
        Self {
            context_len: 500,
            leads: 12,
            patch: 10,
            dim: 64,
            queries: 25,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_mult: 4,
            k1: 256,
            k2: 256,
            levels: 2,
            pred_len: 250,
            beta: DEFAULT_BETA,
            lambda_recon: 1.0,
            lambda_pred: 0.5,
            lambda_vq: 1.0,
            pred_from_quantized: true,
        }
    }
}

impl BeatConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.context_len == 0 || self.patch == 0 || self.context_len % self.patch != 0 {
            return bad(format!(
                "context length {} must be a positive multiple of patch size {}",
                self.context_len, self.patch
            ));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!(
                "embedding dim {} must be divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if !(1..=2).contains(&self.levels) {
            return bad(format!("levels must be 1 or 2, got {}", self.levels));
        }
        if self.leads == 0 || self.queries == 0 || self.pred_len == 0 || self.ffn_mult == 0 {
            return bad("leads, queries, pred_len and ffn_mult must be positive".into());
        }
        if self.k1 == 0 || (self.levels == 2 && self.k2 == 0) {
            return bad("codebook sizes must be positive".into());
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lambda_recon", self.lambda_recon),
            ("lambda_pred", self.lambda_pred),
            ("lambda_vq", self.lambda_vq),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Patch count `t = T / f`.
    pub fn n_patches(&self) -> usize {
        self.context_len / self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Token count `N = levels * m`.
    pub fn n_tokens(&self) -> usize {
        self.levels * self.queries
    }

    /// Size of the residual book, 0 when there is no residual level.
    pub fn residual_size(&self) -> usize {
        if self.levels == 2 {
            self.k2
        } else {
            0
        }
    }

    /// Key/value form used in checkpoints and config files.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("context-len", self.context_len.to_string()),
            ("leads", self.leads.to_string()),
            ("patch", self.patch.to_string()),
            ("dim", self.dim.to_string()),
            ("queries", self.queries.to_string()),
            ("enc-layers", self.enc_layers.to_string()),
            ("dec-layers", self.dec_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn-mult", self.ffn_mult.to_string()),
            ("k1", self.k1.to_string()),
            ("k2", self.k2.to_string()),
            ("levels", self.levels.to_string()),
            ("pred-len", self.pred_len.to_string()),
            ("beta", self.beta.to_string()),
            ("lambda-recon", self.lambda_recon.to_string()),
            ("lambda-pred", self.lambda_pred.to_string()),
            ("lambda-vq", self.lambda_vq.to_string()),
            ("pred-from-quantized", self.pred_from_quantized.to_string()),
        ];
        v.drain(..).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one key/value setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "context-len" => self.context_len = num(key, value)?,
            "leads" => self.leads = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "queries" => self.queries = num(key, value)?,
            "enc-layers" => self.enc_layers = num(key, value)?,
            "dec-layers" => self.dec_layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn-mult" => self.ffn_mult = num(key, value)?,
            "k1" => self.k1 = num(key, value)?,
            "k2" => self.k2 = num(key, value)?,
            "levels" => self.levels = num(key, value)?,
            "pred-len" => self.pred_len = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lambda-recon" => self.lambda_recon = num(key, value)?,
            "lambda-pred" => self.lambda_pred = num(key, value)?,
            "lambda-vq" => self.lambda_vq = num(key, value)?,
            "pred-from-quantized" => self.pred_from_quantized = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
