//! Dual-level vector quantization: a core codebook followed by a residual
//! codebook that quantizes what the core entry left over.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Commitment weight used when none is configured.
pub const DEFAULT_BETA: f64 = 0.25;
pub const KMEANS_ITERS: usize = 10;
pub const REINIT_NOISE_STD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F> {
    /// `K x c`
    pub entries: Array2<F>,
    pub level: u8,
}

impl<F: NdFloat> Codebook<F> {
    pub fn new(entries: Array2<F>, level: u8) -> Result<Self> {
        if entries.nrows() == 0 {
            return Err(Error::EmptyCodebook);
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("level-{level} codebook")));
        }
        Ok(Self { entries, level })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entry(&self, index: usize) -> ArrayView1<'_, F> {
        self.entries.row(index)
    }
}

fn sq_dist<F: NdFloat>(a: ArrayView1<F>, b: ArrayView1<F>) -> F {
    a.iter()
        .zip(b.iter())
        .fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Index and squared distance of the entry closest to `v`; ties go to the
/// lowest index.
pub fn nearest_code<F: NdFloat>(codebook: &Codebook<F>, v: ArrayView1<F>) -> Result<(usize, F)> {
    if codebook.size() == 0 {
        return Err(Error::EmptyCodebook);
    }
    if codebook.dim() != v.len() {
        return Err(Error::Shape(format!(
            "vector of length {} against codebook of dimension {}",
            v.len(),
            codebook.dim()
        )));
    }
    let mut best = (0, F::infinity());
    for (i, row) in codebook.entries.rows().into_iter().enumerate() {
        let d = sq_dist(row, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Per-entry hit counters since the last reset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageStats {
    pub core_hits: Vec<u64>,
    pub residual_hits: Vec<u64>,
    pub total: u64,
}

impl UsageStats {
    /// `k2 = 0` for single-level quantization.
    pub fn new(k1: usize, k2: usize) -> Self {
        Self {
            core_hits: vec![0; k1],
            residual_hits: vec![0; k2],
            total: 0,
        }
    }

    pub fn record(&mut self, core: usize, residual: Option<usize>) {
        self.core_hits[core] += 1;
        if let Some(r) = residual {
            self.residual_hits[r] += 1;
        }
        self.total += 1;
    }

    pub fn reset(&mut self) {
        self.core_hits.iter_mut().for_each(|h| *h = 0);
        self.residual_hits.iter_mut().for_each(|h| *h = 0);
        self.total = 0;
    }

    pub fn merge(&mut self, other: &UsageStats) {
        for (a, b) in self.core_hits.iter_mut().zip(&other.core_hits) {
            *a += b;
        }
        for (a, b) in self.residual_hits.iter_mut().zip(&other.residual_hits) {
            *a += b;
        }
        self.total += other.total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvqResult<F> {
    pub core_index: usize,
    pub residual_index: Option<usize>,
    pub q1: Array1<F>,
    /// All zeros when there is no residual level.
    pub q2: Array1<F>,
    pub quantized: Array1<F>,
    pub pre_quant: Array1<F>,
}

impl<F: NdFloat> DvqResult<F> {
    /// `v - q1`, the target of the residual level.
    pub fn residual_target(&self) -> Array1<F> {
        &self.pre_quant - &self.q1
    }
}

/// Core quantization, then residual quantization of `v - q1` when a second
/// codebook is present.
pub fn dvq_quantize<F: NdFloat>(
    core: &Codebook<F>,
    residual: Option<&Codebook<F>>,
    v: ArrayView1<F>,
    stats: Option<&mut UsageStats>,
) -> Result<DvqResult<F>> {
    let (ci, _) = nearest_code(core, v)?;
    let q1 = core.entry(ci).to_owned();
    let (ri, q2) = match residual {
        Some(book) => {
            let r = &v - &q1;
            let (ri, _) = nearest_code(book, r.view())?;
            (Some(ri), book.entry(ri).to_owned())
        }
        None => (None, Array1::zeros(v.len())),
    };
    if let Some(stats) = stats {
        stats.record(ci, ri);
    }
    let quantized = &q1 + &q2;
    Ok(DvqResult {
        core_index: ci,
        residual_index: ri,
        q1,
        q2,
        quantized,
        pre_quant: v.to_owned(),
    })
}

/// Codebook and commitment components of the quantization loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLoss<F> {
    /// `sum ||sg[h] - q||^2`, moves codebook entries.
    pub codebook: F,
    /// `beta * sum ||h - sg[q]||^2`, moves encoder outputs.
    pub commitment: F,
}

impl<F: NdFloat> VqLoss<F> {
    pub fn total(&self) -> F {
        self.codebook + self.commitment
    }
}

/// Sum over queries and levels of the two stop-gradient terms. The level-1
/// target is `v`; the level-2 target is `v - q1`.
pub fn vq_loss<F: NdFloat>(results: &[DvqResult<F>], beta: F) -> VqLoss<F> {
    let mut dist = F::zero();
    for r in results {
        dist += sq_dist(r.pre_quant.view(), r.q1.view());
        if r.residual_index.is_some() {
            let target = r.residual_target();
            dist += sq_dist(target.view(), r.q2.view());
        }
    }
    VqLoss {
        codebook: dist,
        commitment: beta * dist,
    }
}

/// Gradients of [`vq_loss`] for one query, split along the stop-gradient
/// boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct VqGrads<F> {
    /// Reaches the encoder output only through the commitment terms.
    pub pre_quant: Array1<F>,
    pub core_entry: Array1<F>,
    pub residual_entry: Option<Array1<F>>,
}

pub fn vq_loss_grads<F: NdFloat>(r: &DvqResult<F>, beta: F, scale: F) -> VqGrads<F> {
    let two = F::from(2.0).unwrap() * scale;
    let d1 = &r.pre_quant - &r.q1;
    let mut pre_quant = d1.mapv(|x| two * beta * x);
    let core_entry = d1.mapv(|x| -two * x);
    let residual_entry = r.residual_index.map(|_| {
        let d2 = r.residual_target() - &r.q2;
        pre_quant.zip_mut_with(&d2, |g, &x| *g += two * beta * x);
        d2.mapv(|x| -two * x)
    });
    VqGrads {
        pre_quant,
        core_entry,
        residual_entry,
    }
}

/// Straight-through estimator: the forward value is the quantized vector,
/// the Jacobian with respect to the pre-quantization vector is the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct StraightThrough;

impl StraightThrough {
    pub fn forward<F: NdFloat>(&self, pre_quant: ArrayView2<F>, quantized: ArrayView2<F>) -> Result<Array2<F>> {
        if pre_quant.dim() != quantized.dim() {
            return Err(Error::Shape(format!(
                "pre-quant {:?} vs quantized {:?}",
                pre_quant.dim(),
                quantized.dim()
            )));
        }
        Ok(quantized.to_owned())
    }

    pub fn jvp<F: NdFloat>(&self, tangent: ArrayView2<F>) -> Array2<F> {
        tangent.to_owned()
    }

    pub fn vjp<F: NdFloat>(&self, cotangent: ArrayView2<F>) -> Array2<F> {
        cotangent.to_owned()
    }
}

/// Percentage of entries (over both books jointly) hit at least once.
pub fn utilization(stats: &UsageStats, k1: usize, k2: usize) -> Result<f64> {
    if stats.total == 0 {
        return Err(Error::Invalid("utilization needs at least one assignment".into()));
    }
    let used = stats.core_hits.iter().take(k1).filter(|h| **h > 0).count()
        + stats.residual_hits.iter().take(k2).filter(|h| **h > 0).count();
    Ok(100.0 * used as f64 / (k1 + k2) as f64)
}

/// Lloyd's algorithm from seeded k-means++ starts. Accumulation is in `f64`.
pub fn kmeans<F: NdFloat>(data: ArrayView2<F>, k: usize, iters: usize, rng: &mut impl Rng) -> Result<Array2<F>> {
    let (n, dim) = data.dim();
    if k == 0 {
        return Err(Error::EmptyCodebook);
    }
    if n < k {
        return Err(Error::NotEnoughSamples { needed: k, got: n });
    }
    let points: Vec<Vec<f64>> = data
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_f64().unwrap()).collect())
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut closest: Vec<f64> = points.iter().map(|p| dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in closest.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(closest.iter_mut()) {
            *d = d.min(dist(p, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (p, a) in points.iter().zip(assign.iter_mut()) {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            *a = best.0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &cnt) in centers.iter_mut().zip(&sums).zip(&counts) {
            // empty clusters keep their previous center
            if cnt > 0 {
                for (cv, sv) in c.iter_mut().zip(s) {
                    *cv = sv / cnt as f64;
                }
            }
        }
    }
    Ok(Array2::from_shape_fn((k, dim), |(i, j)| F::from(centers[i][j]).unwrap()))
}

/// k-means on encoder outputs for the core book, then on the stage-1
/// residuals for the residual book.
pub fn init_codebooks<F: NdFloat>(
    samples: ArrayView2<F>,
    k1: usize,
    k2: usize,
    levels: usize,
    seed: u64,
) -> Result<(Codebook<F>, Option<Codebook<F>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let core = Codebook::new(kmeans(samples, k1, KMEANS_ITERS, &mut rng)?, 1)?;
    if levels < 2 {
        return Ok((core, None));
    }
    let mut residuals = samples.to_owned();
    for mut row in residuals.rows_mut() {
        let (i, _) = nearest_code(&core, row.view())?;
        row -= &core.entry(i);
    }
    let residual = Codebook::new(kmeans(residuals.view(), k2, KMEANS_ITERS, &mut rng)?, 2)?;
    Ok((core, Some(residual)))
}

/// Replaces every entry with zero hits by a random recent pre-quantization
/// vector plus small Gaussian noise. Returns how many entries moved.
pub fn reinit_dead_codes<F: NdFloat>(
    codebook: &mut Codebook<F>,
    hits: &[u64],
    recent: ArrayView2<F>,
    rng: &mut impl Rng,
) -> Result<usize> {
    if recent.nrows() == 0 {
        return Ok(0);
    }
    if recent.ncols() != codebook.dim() {
        return Err(Error::Shape(format!(
            "recent vectors of dimension {} for codebook of dimension {}",
            recent.ncols(),
            codebook.dim()
        )));
    }
    let noise = Normal::new(0.0, REINIT_NOISE_STD).expect("positive std");
    let mut moved = 0;
    for (i, &h) in hits.iter().enumerate().take(codebook.size()) {
        if h > 0 {
            continue;
        }
        let src = recent.row(rng.random_range(0..recent.nrows()));
        for (dst, &v) in codebook.entries.row_mut(i).iter_mut().zip(src.iter()) {
            *dst = v + F::from(noise.sample(rng)).unwrap();
        }
        moved += 1;
    }
    Ok(moved)
}
