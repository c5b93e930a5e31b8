use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::BeatConfig;
use super::nn::{cst, Block, LayerNorm, Linear};
use crate::error::Result;
use crate::quantizer::Codebook;

const QUERY_INIT_STD: f64 = 0.02;

/// Every learnable array of the tokenizer. A value of this type also serves
/// as a gradient (or optimizer moment) with identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatParams<F> {
    pub config: BeatConfig,
    /// `f*C -> c`
    pub patch_proj: Linear<F>,
    /// `m x c`
    pub queries: Array2<F>,
    pub mask_token: Array1<F>,
    pub encoder: Vec<Block<F>>,
    pub enc_norm: LayerNorm<F>,
    pub decoder: Vec<Block<F>>,
    pub dec_norm: LayerNorm<F>,
    /// `c -> f*C`, applied per patch slot.
    pub recon_head: Linear<F>,
    /// `m*c -> P*C`
    pub pred_head: Linear<F>,
    pub core_codebook: Codebook<F>,
    pub residual_codebook: Option<Codebook<F>>,
    /// Sinusoidal table for the `t` patch slots; not learnable.
    pub(crate) positions: Array2<F>,
}

/// `pe[p, 2i] = sin(p / 10000^(2i/c))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions<F: NdFloat>(slots: usize, dim: usize) -> Array2<F> {
    Array2::from_shape_fn((slots, dim), |(p, j)| {
        let pair = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        cst(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Seeded initialization. Codebooks start as standard-normal placeholders
/// until training replaces them with k-means centroids.
pub fn init_model<F: NdFloat>(config: &BeatConfig, seed: u64) -> Result<BeatParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.dim;
    let patch_width = config.patch * config.leads;
    let small = Normal::new(0.0, QUERY_INIT_STD).expect("positive std");
    let unit = Normal::new(0.0, 1.0).expect("positive std");

    let patch_proj = Linear::init(patch_width, c, &mut rng);
    let queries = Array2::from_shape_fn((config.queries, c), |_| cst(small.sample(&mut rng)));
    let mask_token = Array1::from_shape_fn(c, |_| cst(small.sample(&mut rng)));
    let encoder = (0..config.enc_layers)
        .map(|_| Block::init(c, config.heads, config.ffn_mult, &mut rng))
        .collect();
    let decoder = (0..config.dec_layers)
        .map(|_| Block::init(c, config.heads, config.ffn_mult, &mut rng))
        .collect();
    let recon_head = Linear::init(c, patch_width, &mut rng);
    let pred_head = Linear::init(config.queries * c, config.pred_len * config.leads, &mut rng);
    let core = Array2::from_shape_fn((config.k1, c), |_| cst(unit.sample(&mut rng)));
    let core_codebook = Codebook::new(core, 1)?;
    let residual_codebook = if config.levels == 2 {
        let res = Array2::from_shape_fn((config.k2, c), |_| cst(unit.sample(&mut rng)));
        Some(Codebook::new(res, 2)?)
    } else {
        None
    };

    Ok(BeatParams {
        config: config.clone(),
        patch_proj,
        queries,
        mask_token,
        encoder,
        enc_norm: LayerNorm::new(c),
        decoder,
        dec_norm: LayerNorm::new(c),
        recon_head,
        pred_head,
        core_codebook,
        residual_codebook,
        positions: sinusoidal_positions(config.n_patches(), c),
    })
}

macro_rules! linear_arrays {
    ($out:ident, $prefix:expr, $lin:expr, $view:ident) => {
        $out.push((format!("{}.w", $prefix), $lin.w.$view().into_dyn()));
        $out.push((format!("{}.b", $prefix), $lin.b.$view().into_dyn()));
    };
}

macro_rules! norm_arrays {
    ($out:ident, $prefix:expr, $ln:expr, $view:ident) => {
        $out.push((format!("{}.g", $prefix), $ln.gain.$view().into_dyn()));
        $out.push((format!("{}.b", $prefix), $ln.bias.$view().into_dyn()));
    };
}

macro_rules! block_arrays {
    ($out:ident, $prefix:expr, $b:expr, $view:ident) => {
        let p = $prefix;
        norm_arrays!($out, format!("{p}.ln1"), $b.ln1, $view);
        linear_arrays!($out, format!("{p}.attn.q"), $b.attn.q, $view);
        linear_arrays!($out, format!("{p}.attn.k"), $b.attn.k, $view);
        linear_arrays!($out, format!("{p}.attn.v"), $b.attn.v, $view);
        linear_arrays!($out, format!("{p}.attn.o"), $b.attn.o, $view);
        norm_arrays!($out, format!("{p}.ln2"), $b.ln2, $view);
        linear_arrays!($out, format!("{p}.ffn.up"), $b.ffn.up, $view);
        linear_arrays!($out, format!("{p}.ffn.down"), $b.ffn.down, $view);
    };
}

impl<F: NdFloat> BeatParams<F> {
    /// Named views of every learnable array, in a fixed order.
    pub fn arrays(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        linear_arrays!(out, "patch", self.patch_proj, view);
        out.push(("queries".to_string(), self.queries.view().into_dyn()));
        out.push(("mask_token".to_string(), self.mask_token.view().into_dyn()));
        for (i, b) in self.encoder.iter().enumerate() {
            block_arrays!(out, format!("enc.{i}"), b, view);
        }
        norm_arrays!(out, "enc.norm", self.enc_norm, view);
        for (i, b) in self.decoder.iter().enumerate() {
            block_arrays!(out, format!("dec.{i}"), b, view);
        }
        norm_arrays!(out, "dec.norm", self.dec_norm, view);
        linear_arrays!(out, "recon", self.recon_head, view);
        linear_arrays!(out, "pred", self.pred_head, view);
        out.push(("codebook.core".to_string(), self.core_codebook.entries.view().into_dyn()));
        if let Some(book) = &self.residual_codebook {
            out.push(("codebook.residual".to_string(), book.entries.view().into_dyn()));
        }
        out
    }

    /// Mutable counterpart of [`arrays`](Self::arrays), same order.
    pub fn arrays_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        linear_arrays!(out, "patch", self.patch_proj, view_mut);
        out.push(("queries".to_string(), self.queries.view_mut().into_dyn()));
        out.push(("mask_token".to_string(), self.mask_token.view_mut().into_dyn()));
        for (i, b) in self.encoder.iter_mut().enumerate() {
            block_arrays!(out, format!("enc.{i}"), b, view_mut);
        }
        norm_arrays!(out, "enc.norm", self.enc_norm, view_mut);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            block_arrays!(out, format!("dec.{i}"), b, view_mut);
        }
        norm_arrays!(out, "dec.norm", self.dec_norm, view_mut);
        linear_arrays!(out, "recon", self.recon_head, view_mut);
        linear_arrays!(out, "pred", self.pred_head, view_mut);
        out.push(("codebook.core".to_string(), self.core_codebook.entries.view_mut().into_dyn()));
        if let Some(book) = &mut self.residual_codebook {
            out.push(("codebook.residual".to_string(), book.entries.view_mut().into_dyn()));
        }
        out
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut a) in z.arrays_mut() {
            a.fill(F::zero());
        }
        z
    }

    pub fn n_params(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += other * scale`, array by array.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for ((_, mut dst), (_, src)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            dst.zip_mut_with(&src, |d, &s| *d += s * scale);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut a) in self.arrays_mut() {
            a.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|(_, a)| a.iter().map(|v| v.to_f64().unwrap().powi(2)).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> Option<String> {
        self.arrays()
            .into_iter()
            .find(|(_, a)| a.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    /// Converts every array to another float type.
    pub fn cast<G: NdFloat>(&self) -> BeatParams<G> {
        let mut out: BeatParams<G> = init_model(&self.config, 0).expect("config already validated");
        for ((_, mut dst), (_, src)) in out.arrays_mut().into_iter().zip(self.arrays()) {
            dst.zip_mut_with(&src, |d, &s| *d = G::from(s).unwrap());
        }
        out
    }
}
