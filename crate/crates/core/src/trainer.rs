//! AdamW with a cosine schedule, k-means codebook warm start and
//! epoch-level dead-code maintenance.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, NdFloat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::eval_model;
use crate::model::{backward, encode, forward_losses, init_model, BeatConfig, BeatParams, LossBundle};
use crate::preprocess::SegmentPair;
use crate::quantizer::{init_codebooks, reinit_dead_codes, DvqResult, UsageStats};

/// Encoder outputs harvested before k-means initialization.
pub const WARMUP_SAMPLES: usize = 4096;
/// Rows of recent pre-quantization vectors kept for dead-code reinit.
pub const RECENT_BUFFER: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub m: BeatParams<F>,
    pub v: BeatParams<F>,
    pub step: u64,
    pub hyper: AdamW,
}

impl<F: NdFloat> OptimizerState<F> {
    pub fn new(params: &BeatParams<F>, hyper: AdamW) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            hyper,
        }
    }
}

fn shapes<F: NdFloat>(p: &BeatParams<F>) -> Vec<Vec<usize>> {
    p.arrays().iter().map(|(_, a)| a.shape().to_vec()).collect()
}

/// One bias-corrected AdamW update at learning rate `lr`. Weight decay is
/// applied to the parameter directly, independent of the gradient.
pub fn adamw_step<F: NdFloat>(
    params: &mut BeatParams<F>,
    grads: &BeatParams<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let want = shapes(params);
    if shapes(grads) != want || shapes(&state.m) != want || shapes(&state.v) != want {
        return Err(Error::Shape("gradient or moment shapes differ from the parameters".into()));
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let f = |x: f64| F::from(x).unwrap();
    let (b1, b2, eps, lr_f, decay) = (f(h.beta1), f(h.beta2), f(h.eps), f(lr), f(lr * h.weight_decay));
    let (bc1, bc2) = (f(bc1), f(bc2));
    let one = F::one();
    let mut m_arrays = state.m.arrays_mut();
    let mut v_arrays = state.v.arrays_mut();
    for (k, ((_, mut p), (_, g))) in params.arrays_mut().into_iter().zip(grads.arrays()).enumerate() {
        let m = &mut m_arrays[k].1;
        let v = &mut v_arrays[k].1;
        ndarray::Zip::from(&mut p)
            .and(&g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - decay * *p - lr_f * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// `min + 0.5 (base - min) (1 + cos(pi step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * s).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub min_lr: f64,
    /// Global-norm gradient clipping; `None` disables it.
    pub clip_norm: Option<f64>,
    pub dead_code_reinit: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamW::default(),
            min_lr: 0.0,
            clip_norm: Some(1.0),
            dead_code_reinit: true,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training-set means over the epoch.
    pub train: LossBundle,
    pub eval_loss_r: f64,
    pub eval_loss_p: f64,
    pub utilization_pct: f64,
    /// Rate of the last update in the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,l_recon,l_pred,l_vq,l_total,eval_loss_r,eval_loss_p,utilization_pct,lr";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.train.recon,
                r.train.pred,
                r.train.vq,
                r.train.total,
                r.eval_loss_r,
                r.eval_loss_p,
                r.utilization_pct,
                r.lr
            )
            .expect("writing to a string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Runs the encoder over up to [`WARMUP_SAMPLES`] latent rows of the training
/// set and fits both codebooks with k-means.
pub fn warm_start_codebooks(params: &mut BeatParams<f32>, train_set: &[SegmentPair], seed: u64) -> Result<()> {
    let cfg = params.config.clone();
    let per = cfg.queries;
    let take = train_set.len().min(WARMUP_SAMPLES.div_ceil(per));
    let latents: Vec<Array2<f32>> = train_set[..take]
        .par_iter()
        .map(|p| encode(params, p.context.samples.view()))
        .collect::<Result<_>>()?;
    let rows: Vec<f32> = latents.iter().flat_map(|l| l.iter().copied()).collect();
    let samples = Array2::from_shape_vec((rows.len() / cfg.dim, cfg.dim), rows).expect("sizes agree");
    let (core, residual) = init_codebooks(samples.view(), cfg.k1, cfg.k2, cfg.levels, seed)?;
    params.core_codebook = core;
    params.residual_codebook = residual;
    Ok(())
}

struct Recent {
    core: VecDeque<Array1<f32>>,
    residual: VecDeque<Array1<f32>>,
}

impl Recent {
    fn push(buf: &mut VecDeque<Array1<f32>>, row: Array1<f32>) {
        if buf.len() == RECENT_BUFFER {
            buf.pop_front();
        }
        buf.push_back(row);
    }

    fn matrix(buf: &VecDeque<Array1<f32>>, dim: usize) -> Array2<f32> {
        let data: Vec<f32> = buf.iter().flat_map(|r| r.iter().copied()).collect();
        Array2::from_shape_vec((buf.len(), dim), data).expect("sizes agree")
    }
}

fn check_sets(train_set: &[SegmentPair], eval_set: &[SegmentPair], cfg: &BeatConfig) -> Result<()> {
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Invalid("training and evaluation sets must be nonempty".into()));
    }
    for p in train_set.iter().chain(eval_set) {
        if p.context.samples.dim() != (cfg.context_len, cfg.leads) || p.future.dim() != (cfg.pred_len, cfg.leads) {
            return Err(Error::Shape(format!(
                "pair of shape {:?}/{:?} does not fit context {}x{} and future {}x{}",
                p.context.samples.dim(),
                p.future.dim(),
                cfg.context_len,
                cfg.leads,
                cfg.pred_len,
                cfg.leads
            )));
        }
    }
    Ok(())
}

/// [`train_with`] without a progress callback.
pub fn train(
    config: &BeatConfig,
    opts: &TrainConfig,
    train_set: &[SegmentPair],
    eval_set: &[SegmentPair],
) -> Result<(BeatParams<f32>, TrainHistory)> {
    train_with(config, opts, train_set, eval_set, |_| {})
}

/// Full training run. Per-sample gradients may be computed on `opts.threads`
/// workers; they are always summed in batch order, so results depend on the
/// seed alone.
pub fn train_with(
    config: &BeatConfig,
    opts: &TrainConfig,
    train_set: &[SegmentPair],
    eval_set: &[SegmentPair],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(BeatParams<f32>, TrainHistory)> {
    config.validate()?;
    check_sets(train_set, eval_set, config)?;
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut params: BeatParams<f32> = init_model(config, opts.seed)?;
    pool.install(|| warm_start_codebooks(&mut params, train_set, opts.seed))?;

    let mut history = TrainHistory::default();
    let mut state = OptimizerState::new(&params, opts.optimizer);
    let batches_per_epoch = train_set.len().div_ceil(opts.batch_size);
    let total_steps = (opts.epochs * batches_per_epoch) as u64;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut reinit_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut recent = Recent {
        core: VecDeque::new(),
        residual: VecDeque::new(),
    };

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut stats = UsageStats::new(config.k1, config.residual_size());
        let mut sums = LossBundle::default();
        let mut lr = opts.optimizer.lr;
        for batch in order.chunks(opts.batch_size) {
            let results: Vec<(LossBundle, BeatParams<f32>, Vec<DvqResult<f32>>)> =
                pool.install(|| {
                    batch
                        .par_iter()
                        .map(|&i| {
                            let (loss, cache) = forward_losses(&params, &train_set[i])?;
                            let g = backward(&params, &cache);
                            Ok((loss, g, cache.dvq))
                        })
                        .collect::<Result<_>>()
                })?;
            let mut grad = params.zeros_like();
            for (loss, g, dvq) in &results {
                if !loss.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged at epoch {epoch}, step {} (recon {}, pred {}, vq {})",
                        state.step + 1,
                        loss.recon,
                        loss.pred,
                        loss.vq
                    )));
                }
                sums.add(loss);
                grad.add_scaled(g, 1.0);
                for r in dvq {
                    stats.record(r.core_index, r.residual_index);
                    Recent::push(&mut recent.core, r.pre_quant.clone());
                    if r.residual_index.is_some() {
                        Recent::push(&mut recent.residual, r.residual_target());
                    }
                }
            }
            grad.scale(1.0 / batch.len() as f32);
            if let Some(max) = opts.clip_norm {
                let norm = grad.global_norm();
                if norm > max {
                    grad.scale((max / norm) as f32);
                }
            }
            lr = cosine_lr(state.step, total_steps, opts.optimizer.lr, opts.min_lr)?;
            adamw_step(&mut params, &grad, &mut state, lr)?;
        }
        if let Some(name) = params.all_finite() {
            return Err(Error::NonFinite(format!("parameter {name} became non-finite at epoch {epoch}")));
        }

        if opts.dead_code_reinit {
            let core_recent = Recent::matrix(&recent.core, config.dim);
            reinit_dead_codes(&mut params.core_codebook, &stats.core_hits, core_recent.view(), &mut reinit_rng)?;
            if let Some(book) = params.residual_codebook.as_mut() {
                let res_recent = Recent::matrix(&recent.residual, config.dim);
                reinit_dead_codes(book, &stats.residual_hits, res_recent.view(), &mut reinit_rng)?;
            }
        }

        let metrics = pool.install(|| eval_model(&params, eval_set))?;
        let record = EpochRecord {
            epoch,
            train: sums.scaled(1.0 / train_set.len() as f64),
            eval_loss_r: metrics.loss_r,
            eval_loss_p: metrics.loss_p,
            utilization_pct: metrics.utilization_pct,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> BeatConfig {
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
            pred_len: 10,
            ..BeatConfig::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p: BeatParams<f64> = init_model(&tiny(), 1).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = OptimizerState::new(&p, AdamW::default());
        adamw_step(&mut p, &g, &mut s, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p: BeatParams<f64> = init_model(&tiny(), 1).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let hyper = AdamW {
            weight_decay: 0.01,
            ..AdamW::default()
        };
        let mut s = OptimizerState::new(&p, hyper);
        adamw_step(&mut p, &g, &mut s, 0.1).unwrap();
        for ((_, a), (_, b)) in p.arrays().into_iter().zip(before.arrays()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - 0.999 * y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn single_step_hand_value() {
        let mut p: BeatParams<f64> = init_model(&tiny(), 2).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.queries[[0, 0]] = 1.0;
        let mut s = OptimizerState::new(&p, AdamW::default());
        adamw_step(&mut p, &g, &mut s, 1e-4).unwrap();
        // m = 0.1, v = 0.001, both bias-corrected to 1.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let want = before.queries[[0, 0]] - 1e-4 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.queries[[0, 0]] - want).abs() < 1e-15);
        assert_eq!(p.queries[[0, 1]], before.queries[[0, 1]]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p: BeatParams<f64> = init_model(&tiny(), 1).unwrap();
        let other: BeatParams<f64> = init_model(&BeatConfig { dim: 4, ..tiny() }, 1).unwrap();
        let mut s = OptimizerState::new(&p, AdamW::default());
        assert!(matches!(adamw_step(&mut p, &other, &mut s, 1e-3), Err(Error::Shape(_))));
        let g = p.zeros_like();
        assert!(adamw_step(&mut p, &g, &mut s, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.0).unwrap(), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5 < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..=37 {
            let lr = cosine_lr(s, 37, 2e-3, 1e-4).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
