use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, NdFloat};

use super::nn::{cst, BlockTape, LayerNormTape};
use super::params::BeatParams;
use crate::error::{Error, Result};
use crate::preprocess::{patchify, unpatchify, SegmentPair};
use crate::quantizer::{dvq_quantize, vq_loss, vq_loss_grads, DvqResult, UsageStats};

/// Loss components for one sample (or a batch mean).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub recon: f64,
    pub pred: f64,
    pub vq: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn add(&mut self, other: &LossBundle) {
        self.recon += other.recon;
        self.pred += other.pred;
        self.vq += other.vq;
        self.total += other.total;
    }

    pub fn scaled(&self, k: f64) -> LossBundle {
        LossBundle {
            recon: self.recon * k,
            pred: self.pred * k,
            vq: self.vq * k,
            total: self.total * k,
        }
    }
}

/// How the bottleneck treats the quantizer.
#[derive(Debug, Clone, Copy)]
pub enum QuantMode<'a, F> {
    /// Nearest-code search on the live latents.
    Live,
    /// Indices and stop-gradient values taken from an earlier pass. The
    /// result is an ordinary differentiable function of the parameters that
    /// agrees with the live pass, value and gradient, at that earlier point.
    Frozen(&'a [DvqResult<F>]),
}

/// Everything a forward pass produced, kept for the backward pass.
pub struct ActivationCache<F> {
    pub x: Array2<F>,
    pub future: Array2<F>,
    pub patches: Array2<F>,
    /// Patch embeddings with positions, `t x c`.
    pub e: Array2<F>,
    /// `[e; queries]`, `(t+m) x c`.
    pub h_in: Array2<F>,
    pub h_latent: Array2<F>,
    /// Latent query rows, `m x c`.
    pub latent_q: Array2<F>,
    pub dvq: Vec<DvqResult<F>>,
    /// Value fed to the decoder and (by default) the prediction head.
    pub quantized: Array2<F>,
    /// Decoder input, `(t+m) x c`.
    pub dec_in: Array2<F>,
    pub h_out: Array2<F>,
    pub recon_patches: Array2<F>,
    pub recon: Array2<F>,
    pub prediction: Array2<F>,
    enc_tapes: Vec<BlockTape<F>>,
    enc_norm: LayerNormTape<F>,
    dec_tapes: Vec<BlockTape<F>>,
    dec_norm: LayerNormTape<F>,
    pred_in: Array2<F>,
}

/// Decoder attention mask over `t` patch slots followed by `m` query rows:
/// every row may read the query rows, and a patch slot may also read itself.
pub fn decoder_mask(t: usize, m: usize) -> Array2<bool> {
    Array2::from_shape_fn((t + m, t + m), |(i, j)| j >= t || (i == j && i < t))
}

fn check_shape<F>(name: &str, a: ArrayView2<F>, want: (usize, usize)) -> Result<()> {
    if a.dim() != want {
        return Err(Error::Shape(format!("{name} is {:?}, expected {:?}", a.dim(), want)));
    }
    Ok(())
}

fn flatten<F: NdFloat>(a: ArrayView2<F>) -> Array2<F> {
    Array2::from_shape_vec((1, a.len()), a.iter().copied().collect()).expect("sizes agree")
}

fn mse<F: NdFloat>(a: ArrayView2<F>, b: ArrayView2<F>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).to_f64().unwrap().powi(2))
        .sum::<f64>()
        / n
}

fn sq_dist<F: NdFloat>(a: &Array1<F>, b: &Array1<F>) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (x, y)| acc + (*x - *y) * (*x - *y))
}

struct EncoderPass<F> {
    patches: Array2<F>,
    e: Array2<F>,
    h_in: Array2<F>,
    h_latent: Array2<F>,
    latent_q: Array2<F>,
    tapes: Vec<BlockTape<F>>,
    norm: LayerNormTape<F>,
}

fn run_encoder<F: NdFloat>(p: &BeatParams<F>, x: ArrayView2<F>) -> Result<EncoderPass<F>> {
    let cfg = &p.config;
    check_shape("context", x, (cfg.context_len, cfg.leads))?;
    let t = cfg.n_patches();
    let patches = patchify(x, cfg.patch)?;
    let e = p.patch_proj.forward(patches.view()) + &p.positions;
    let h_in = concatenate(Axis(0), &[e.view(), p.queries.view()]).expect("widths agree");
    let mut h = h_in.clone();
    let mut tapes = Vec::with_capacity(p.encoder.len());
    for block in &p.encoder {
        let (out, tape) = block.forward(h.view(), None);
        h = out;
        tapes.push(tape);
    }
    let (h_latent, norm) = p.enc_norm.forward(h.view());
    let latent_q = h_latent.slice(s![t.., ..]).to_owned();
    Ok(EncoderPass {
        patches,
        e,
        h_in,
        h_latent,
        latent_q,
        tapes,
        norm,
    })
}

struct DecoderPass<F> {
    dec_in: Array2<F>,
    h_out: Array2<F>,
    recon_patches: Array2<F>,
    recon: Array2<F>,
    tapes: Vec<BlockTape<F>>,
    norm: LayerNormTape<F>,
}

fn run_decoder<F: NdFloat>(p: &BeatParams<F>, quantized: ArrayView2<F>) -> Result<DecoderPass<F>> {
    let cfg = &p.config;
    check_shape("quantized queries", quantized, (cfg.queries, cfg.dim))?;
    let t = cfg.n_patches();
    let slots = p.positions.mapv(|_| F::zero()) + &p.mask_token + &p.positions;
    let dec_in = concatenate(Axis(0), &[slots.view(), quantized]).expect("widths agree");
    let mask = decoder_mask(t, cfg.queries);
    let mut h = dec_in.clone();
    let mut tapes = Vec::with_capacity(p.decoder.len());
    for block in &p.decoder {
        let (out, tape) = block.forward(h.view(), Some(&mask));
        h = out;
        tapes.push(tape);
    }
    let (h_out, norm) = p.dec_norm.forward(h.view());
    let recon_patches = p.recon_head.forward(h_out.slice(s![..t, ..]));
    let recon = unpatchify(recon_patches.view(), cfg.leads)?;
    Ok(DecoderPass {
        dec_in,
        h_out,
        recon_patches,
        recon,
        tapes,
        norm,
    })
}

fn run_predictor<F: NdFloat>(p: &BeatParams<F>, rows: ArrayView2<F>) -> Result<(Array2<F>, Array2<F>)> {
    let cfg = &p.config;
    check_shape("prediction input", rows, (cfg.queries, cfg.dim))?;
    let pred_in = flatten(rows);
    let flat = p.pred_head.forward(pred_in.view());
    let prediction = Array2::from_shape_vec((cfg.pred_len, cfg.leads), flat.iter().copied().collect())
        .expect("sizes agree");
    Ok((prediction, pred_in))
}

/// Latent query rows `m x c` for a `T x C` context.
pub fn encode<F: NdFloat>(params: &BeatParams<F>, x: ArrayView2<F>) -> Result<Array2<F>> {
    Ok(run_encoder(params, x)?.latent_q)
}

/// Dual-codebook quantization of every latent query row.
pub fn quantize<F: NdFloat>(
    params: &BeatParams<F>,
    latent_q: ArrayView2<F>,
    mut stats: Option<&mut UsageStats>,
) -> Result<Vec<DvqResult<F>>> {
    latent_q
        .rows()
        .into_iter()
        .map(|row| {
            dvq_quantize(
                &params.core_codebook,
                params.residual_codebook.as_ref(),
                row,
                stats.as_deref_mut(),
            )
        })
        .collect()
}

/// Reconstructed context `T x C` from `m x c` quantized queries.
pub fn decode_recon<F: NdFloat>(params: &BeatParams<F>, quantized: ArrayView2<F>) -> Result<Array2<F>> {
    Ok(run_decoder(params, quantized)?.recon)
}

/// Predicted continuation `P x C` from `m x c` query rows.
pub fn predict_future<F: NdFloat>(params: &BeatParams<F>, rows: ArrayView2<F>) -> Result<Array2<F>> {
    Ok(run_predictor(params, rows)?.0)
}

fn stack_rows<F: NdFloat>(rows: impl Iterator<Item = Array1<F>>, dim: usize) -> Array2<F> {
    let data: Vec<F> = rows.flat_map(|r| r.to_vec()).collect();
    let n = data.len() / dim.max(1);
    Array2::from_shape_vec((n, dim), data).expect("sizes agree")
}

/// Full forward pass and loss for one context/future pair.
pub fn forward<F: NdFloat>(
    params: &BeatParams<F>,
    x: ArrayView2<F>,
    future: ArrayView2<F>,
    mode: QuantMode<'_, F>,
) -> Result<(LossBundle, ActivationCache<F>)> {
    let cfg = &params.config;
    check_shape("future", future, (cfg.pred_len, cfg.leads))?;
    let enc = run_encoder(params, x)?;
    let beta: F = cst(cfg.beta);
    let norm = (cfg.queries * cfg.levels) as f64;

    let (dvq, quantized, vq_sum) = match mode {
        QuantMode::Live => {
            let dvq = quantize(params, enc.latent_q.view(), None)?;
            let quantized = stack_rows(dvq.iter().map(|r| r.quantized.clone()), cfg.dim);
            let vq_sum = vq_loss(&dvq, beta).total();
            (dvq, quantized, vq_sum)
        }
        QuantMode::Frozen(base) => {
            if base.len() != cfg.queries {
                return Err(Error::Shape(format!(
                    "frozen assignment has {} rows, expected {}",
                    base.len(),
                    cfg.queries
                )));
            }
            let mut vq_sum = F::zero();
            let mut rows = Vec::with_capacity(base.len());
            let mut dvq = Vec::with_capacity(base.len());
            for (b, v) in base.iter().zip(enc.latent_q.rows()) {
                let v = v.to_owned();
                let q1 = params.core_codebook.entry(b.core_index).to_owned();
                vq_sum += sq_dist(&b.pre_quant, &q1) + beta * sq_dist(&v, &b.q1);
                let q2 = match (b.residual_index, &params.residual_codebook) {
                    (Some(ri), Some(book)) => {
                        let q2 = book.entry(ri).to_owned();
                        vq_sum += sq_dist(&b.residual_target(), &q2);
                        let r = &v - &b.q1;
                        vq_sum += beta * sq_dist(&r, &b.q2);
                        q2
                    }
                    _ => Array1::zeros(cfg.dim),
                };
                rows.push(&v + &(&b.quantized - &b.pre_quant));
                dvq.push(DvqResult {
                    core_index: b.core_index,
                    residual_index: b.residual_index,
                    quantized: &q1 + &q2,
                    q1,
                    q2,
                    pre_quant: v,
                });
            }
            (dvq, stack_rows(rows.into_iter(), cfg.dim), vq_sum)
        }
    };

    let dec = run_decoder(params, quantized.view())?;
    let pred_rows = if cfg.pred_from_quantized {
        quantized.view()
    } else {
        enc.latent_q.view()
    };
    let (prediction, pred_in) = run_predictor(params, pred_rows)?;

    let recon_loss = mse(dec.recon.view(), x);
    let pred_loss = mse(prediction.view(), future);
    let vq = vq_sum.to_f64().unwrap() / norm;
    let loss = LossBundle {
        recon: recon_loss,
        pred: pred_loss,
        vq,
        total: cfg.lambda_recon * recon_loss + cfg.lambda_pred * pred_loss + cfg.lambda_vq * vq,
    };
    let cache = ActivationCache {
        x: x.to_owned(),
        future: future.to_owned(),
        patches: enc.patches,
        e: enc.e,
        h_in: enc.h_in,
        h_latent: enc.h_latent,
        latent_q: enc.latent_q,
        dvq,
        quantized,
        dec_in: dec.dec_in,
        h_out: dec.h_out,
        recon_patches: dec.recon_patches,
        recon: dec.recon,
        prediction,
        enc_tapes: enc.tapes,
        enc_norm: enc.norm,
        dec_tapes: dec.tapes,
        dec_norm: dec.norm,
        pred_in,
    };
    Ok((loss, cache))
}

fn pair_arrays<F: NdFloat>(pair: &SegmentPair) -> (Array2<F>, Array2<F>) {
    let cast = |v: &f32| F::from(*v).unwrap();
    (pair.context.samples.map(cast), pair.future.map(cast))
}

/// Live forward pass on a preprocessed pair.
pub fn forward_losses<F: NdFloat>(
    params: &BeatParams<F>,
    pair: &SegmentPair,
) -> Result<(LossBundle, ActivationCache<F>)> {
    let (x, future) = pair_arrays(pair);
    forward(params, x.view(), future.view(), QuantMode::Live)
}

/// Gradient of `L_total` with respect to every learnable array, using the
/// straight-through estimator across the quantizer.
pub fn backward<F: NdFloat>(params: &BeatParams<F>, cache: &ActivationCache<F>) -> BeatParams<F> {
    let cfg = &params.config;
    let t = cfg.n_patches();
    let (m, c) = (cfg.queries, cfg.dim);
    let mut g = params.zeros_like();

    // Reconstruction branch.
    let k_r: F = cst(2.0 * cfg.lambda_recon / cache.x.len() as f64);
    let d_recon = (&cache.recon - &cache.x).mapv(|d| d * k_r);
    let d_recon_patches = patchify(d_recon.view(), cfg.patch).expect("shape checked in forward");
    let d_slots = params.recon_head.backward(
        cache.h_out.slice(s![..t, ..]),
        d_recon_patches.view(),
        &mut g.recon_head,
    );
    let mut d_out = Array2::<F>::zeros((t + m, c));
    d_out.slice_mut(s![..t, ..]).assign(&d_slots);
    let mut dh = params.dec_norm.backward(&cache.dec_norm, d_out.view(), &mut g.dec_norm);
    for (i, block) in params.decoder.iter().enumerate().rev() {
        dh = block.backward(&cache.dec_tapes[i], dh.view(), &mut g.decoder[i]);
    }
    g.mask_token += &dh.slice(s![..t, ..]).sum_axis(Axis(0));
    let mut d_quantized = dh.slice(s![t.., ..]).to_owned();

    // Prediction branch.
    let k_p: F = cst(2.0 * cfg.lambda_pred / cache.future.len() as f64);
    let d_pred = flatten((&cache.prediction - &cache.future).mapv(|d| d * k_p).view());
    let d_pred_in = params
        .pred_head
        .backward(cache.pred_in.view(), d_pred.view(), &mut g.pred_head);
    let d_pred_rows = Array2::from_shape_vec((m, c), d_pred_in.iter().copied().collect()).expect("sizes agree");
    let mut d_latent_q = if cfg.pred_from_quantized {
        d_quantized += &d_pred_rows;
        d_quantized
    } else {
        d_quantized + &d_pred_rows
    };

    // Quantizer: identity to the latents plus the commitment terms.
    let beta: F = cst(cfg.beta);
    let scale: F = cst(cfg.lambda_vq / (m * cfg.levels) as f64);
    for (i, r) in cache.dvq.iter().enumerate() {
        let vg = vq_loss_grads(r, beta, scale);
        let mut row = d_latent_q.row_mut(i);
        row += &vg.pre_quant;
        let mut entry = g.core_codebook.entries.row_mut(r.core_index);
        entry += &vg.core_entry;
        if let (Some(ri), Some(ge), Some(book)) = (r.residual_index, vg.residual_entry, g.residual_codebook.as_mut()) {
            let mut entry = book.entries.row_mut(ri);
            entry += &ge;
        }
    }

    // Encoder.
    let mut d_latent = Array2::<F>::zeros((t + m, c));
    d_latent.slice_mut(s![t.., ..]).assign(&d_latent_q);
    let mut dh = params.enc_norm.backward(&cache.enc_norm, d_latent.view(), &mut g.enc_norm);
    for (i, block) in params.encoder.iter().enumerate().rev() {
        dh = block.backward(&cache.enc_tapes[i], dh.view(), &mut g.encoder[i]);
    }
    g.queries += &dh.slice(s![t.., ..]);
    params
        .patch_proj
        .backward(cache.patches.view(), dh.slice(s![..t, ..]), &mut g.patch_proj);
    g
}

/// Live forward pass followed by [`backward`].
pub fn loss_and_grad<F: NdFloat>(params: &BeatParams<F>, pair: &SegmentPair) -> Result<(LossBundle, BeatParams<F>)> {
    let (loss, cache) = forward_losses(params, pair)?;
    Ok((loss, backward(params, &cache)))
}
