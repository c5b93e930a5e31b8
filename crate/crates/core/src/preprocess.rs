//! Resampling, cleaning, quality-driven window selection, z-scoring and
//! patch reshaping.
//!
//! All signal math runs in `f64`; model-ready [`Segment`]s carry `f32`
//! samples because that is what the `BSEG` container stores.

use ndarray::{s, Array2, ArrayView2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::signal_io::EcgRecord;

pub const TARGET_FS: f64 = 250.0;
pub const SEGMENT_LEN: usize = 500;
pub const PRED_LEN: usize = 250;
const NORM_EPS: f64 = 1e-8;

/// Seconds covered by the baseline moving-median window.
pub const BASELINE_WINDOW_S: f64 = 0.8;
pub const NOTCH_Q: f64 = 30.0;
/// Minimum flatline run length in seconds.
pub const FLATLINE_MIN_S: f64 = 0.2;
pub const FLATLINE_RANGE: f64 = 1e-4;
pub const DRIFT_CUTOFF_HZ: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl NormStats {
    fn is_constant(&self) -> bool {
        self.std == 0.0
    }

    fn apply(&self, x: f64) -> f64 {
        if self.is_constant() {
            x - self.mean as f64
        } else {
            (x - self.mean as f64) / (self.std as f64 + NORM_EPS)
        }
    }
}

/// A normalized `T x C` window ready for the tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Array2<f32>,
    pub fs: f32,
    pub norm_stats: Vec<NormStats>,
    pub source_offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn n_leads(&self) -> usize {
        self.samples.ncols()
    }
}

/// A context window plus the samples that immediately follow it, expressed
/// in the context's normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair {
    pub context: Segment,
    pub future: Array2<f32>,
}

/// Linear-interpolation resampling on the uniform time grid.
pub fn resample(signal: ArrayView2<f64>, from_fs: f64, to_fs: f64) -> Result<Array2<f64>> {
    if !(from_fs > 0.0 && to_fs > 0.0) {
        return Err(Error::Signal(format!(
            "sampling rates must be positive (got {from_fs} -> {to_fs})"
        )));
    }
    if from_fs == to_fs {
        return Ok(signal.to_owned());
    }
    let (len, leads) = signal.dim();
    if len < 2 {
        return Err(Error::Signal(format!(
            "cannot resample a {len}-sample signal"
        )));
    }
    let out_len = (len as f64 * to_fs / from_fs).round() as usize;
    let ratio = from_fs / to_fs;
    let mut out = Array2::zeros((out_len, leads));
    for j in 0..out_len {
        let pos = j as f64 * ratio;
        let i0 = (pos.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        let frac = (pos - i0 as f64).clamp(0.0, 1.0);
        for c in 0..leads {
            let a = signal[[i0, c]];
            let b = signal[[i1, c]];
            out[[j, c]] = a + (b - a) * frac;
        }
    }
    Ok(out)
}

/// Centered moving median; the window is truncated at the edges.
pub fn moving_median(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let half = window / 2;
    let mut sorted: Vec<f64> = Vec::with_capacity(2 * half + 1);
    let insert = |sorted: &mut Vec<f64>, v: f64| {
        let pos = sorted.partition_point(|&e| e < v);
        sorted.insert(pos, v);
    };
    for &v in &x[..(half + 1).min(n)] {
        insert(&mut sorted, v);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            if i + half < n {
                insert(&mut sorted, x[i + half]);
            }
            if i > half {
                let old = x[i - half - 1];
                let pos = sorted.partition_point(|&e| e < old);
                sorted.remove(pos);
            }
        }
        let k = sorted.len();
        out.push(if k % 2 == 1 {
            sorted[k / 2]
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
        });
    }
    out
}

/// Second-order IIR notch (RBJ biquad), single causal pass.
pub fn notch_filter(x: &[f64], fs: f64, freq: f64, q: f64) -> Vec<f64> {
    if freq <= 0.0 || freq >= fs / 2.0 {
        return x.to_vec();
    }
    let w0 = 2.0 * std::f64::consts::PI * freq / fs;
    let alpha = w0.sin() / (2.0 * q);
    let cos = w0.cos();
    let a0 = 1.0 + alpha;
    let (b0, b1, b2) = (1.0 / a0, -2.0 * cos / a0, 1.0 / a0);
    let (a1, a2) = (-2.0 * cos / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&x0| {
            let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            y0
        })
        .collect()
}

/// Centered 3-tap moving average (zero phase); edges average what exists.
pub fn smooth3(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Baseline removal, power-line notch and light smoothing, per lead.
pub fn clean(signal: ArrayView2<f64>, fs: f64, notch_hz: f64) -> Result<Array2<f64>> {
    if !(fs > 0.0) {
        return Err(Error::Signal(format!("sampling rate {fs} is not positive")));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("signal passed to clean".into()));
    }
    let window = ((BASELINE_WINDOW_S * fs).round() as usize) | 1;
    let mut out = Array2::zeros(signal.dim());
    for (lead, mut dst) in signal.axis_iter(Axis(1)).zip(out.axis_iter_mut(Axis(1))) {
        let x: Vec<f64> = lead.to_vec();
        let trend = moving_median(&x, window);
        let detrended: Vec<f64> = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
        let notched = notch_filter(&detrended, fs, notch_hz, NOTCH_Q);
        for (d, v) in dst.iter_mut().zip(smooth3(&notched)) {
            *d = v;
        }
    }
    Ok(out)
}

/// Fraction of samples that sit in flat runs of at least `min_run` samples.
fn flatline_fraction(x: &[f64], min_run: usize) -> f64 {
    let n = x.len();
    let mut flat = 0usize;
    let mut start = 0;
    while start < n {
        let (mut lo, mut hi) = (x[start], x[start]);
        let mut end = start + 1;
        while end < n {
            let v = x[end];
            let (nlo, nhi) = (lo.min(v), hi.max(v));
            if nhi - nlo >= FLATLINE_RANGE {
                break;
            }
            lo = nlo;
            hi = nhi;
            end += 1;
        }
        if end - start >= min_run {
            flat += end - start;
        }
        start = end;
    }
    flat as f64 / n as f64
}

fn clip_fraction(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
    x.iter().filter(|&&v| v == max || v == min).count() as f64 / x.len() as f64
}

fn drift_ratio(x: &[f64], fs: f64, planner: &mut FftPlanner<f64>) -> f64 {
    let n = x.len();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let mut total = 0.0;
    let mut low = 0.0;
    for (k, z) in buf.iter().enumerate() {
        let p = z.norm_sqr();
        total += p;
        let freq = k.min(n - k) as f64 * fs / n as f64;
        if freq < DRIFT_CUTOFF_HZ {
            low += p;
        }
    }
    if total > 0.0 {
        low / total
    } else {
        0.0
    }
}

/// The three quality components, each in `[0, 1]` and averaged over leads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityParts {
    pub flatline: f64,
    pub clip: f64,
    pub drift: f64,
}

impl QualityParts {
    pub fn score(&self) -> f64 {
        (1.0 - self.flatline.max(self.clip).max(self.drift)).clamp(0.0, 1.0)
    }
}

pub fn quality_parts(window: ArrayView2<f64>, fs: f64) -> QualityParts {
    let leads = window.ncols().max(1) as f64;
    let min_run = ((FLATLINE_MIN_S * fs).round() as usize).max(1);
    let mut planner = FftPlanner::new();
    let mut parts = QualityParts {
        flatline: 0.0,
        clip: 0.0,
        drift: 0.0,
    };
    for lead in window.axis_iter(Axis(1)) {
        let x = lead.to_vec();
        parts.flatline += flatline_fraction(&x, min_run) / leads;
        parts.clip += clip_fraction(&x) / leads;
        parts.drift += drift_ratio(&x, fs, &mut planner) / leads;
    }
    parts
}

/// Signal quality in `[0, 1]`: one minus the worst of flatline, clipping and
/// low-frequency drift.
pub fn quality_score(window: ArrayView2<f64>, fs: f64) -> f64 {
    if window.nrows() < 2 {
        return 0.0;
    }
    quality_parts(window, fs).score()
}

/// The best window found by [`select_window`].
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub offset: usize,
    pub score: f64,
    pub samples: Array2<f64>,
}

impl Window {
    pub fn normalize(&self, fs: f64) -> Segment {
        let mut seg = normalize(self.samples.view(), fs);
        seg.source_offset = self.offset;
        seg
    }
}

/// Slides a `len`-sample window with stride `len / 4` and keeps the
/// highest-scoring one (earliest on ties).
pub fn select_window(signal: ArrayView2<f64>, fs: f64, len: usize) -> Result<Window> {
    select_window_within(signal, fs, len, signal.nrows())
}

/// Like [`select_window`] but only considers windows ending at or before `end`.
pub fn select_window_within(
    signal: ArrayView2<f64>,
    fs: f64,
    len: usize,
    end: usize,
) -> Result<Window> {
    let end = end.min(signal.nrows());
    if len == 0 || end < len {
        return Err(Error::Signal(format!(
            "record of {end} usable samples is shorter than the {len}-sample window"
        )));
    }
    let stride = (len / 4).max(1);
    let mut best: Option<(usize, f64)> = None;
    let mut offset = 0;
    while offset + len <= end {
        let score = quality_score(signal.slice(s![offset..offset + len, ..]), fs);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((offset, score));
        }
        offset += stride;
    }
    let (offset, score) = best.expect("at least one window fits");
    Ok(Window {
        offset,
        score,
        samples: signal.slice(s![offset..offset + len, ..]).to_owned(),
    })
}

fn lead_stats(x: ArrayView2<f64>) -> Vec<NormStats> {
    x.axis_iter(Axis(1))
        .map(|lead| {
            let n = lead.len() as f64;
            let mean = lead.sum() / n;
            let var = lead.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let constant = std <= 1e-12 * mean.abs().max(1.0);
            NormStats {
                mean: mean as f32,
                std: if constant { 0.0 } else { std as f32 },
            }
        })
        .collect()
}

/// Per-lead z-score with population standard deviation.
pub fn normalize(raw: ArrayView2<f64>, fs: f64) -> Segment {
    let stats = lead_stats(raw);
    let samples = apply_stats(raw, &stats);
    Segment {
        samples,
        fs: fs as f32,
        norm_stats: stats,
        source_offset: 0,
    }
}

/// Maps physical samples into the coordinate frame defined by `stats`.
pub fn apply_stats(raw: ArrayView2<f64>, stats: &[NormStats]) -> Array2<f32> {
    let mut out = Array2::zeros(raw.dim());
    for ((t, c), dst) in out.indexed_iter_mut() {
        let v = raw[[t, c]];
        let st = &stats[c];
        *dst = if st.is_constant() && v == st.mean as f64 {
            0.0
        } else {
            st.apply(v) as f32
        };
    }
    out
}

/// Builds a pair from a cleaned record: context at `offset`, future right after.
pub fn make_pair(
    signal: ArrayView2<f64>,
    fs: f64,
    offset: usize,
    context_len: usize,
    pred_len: usize,
) -> Result<SegmentPair> {
    if offset + context_len + pred_len > signal.nrows() {
        return Err(Error::Signal(format!(
            "need {} samples from offset {offset}, record has {}",
            context_len + pred_len,
            signal.nrows()
        )));
    }
    let raw = signal.slice(s![offset..offset + context_len, ..]);
    let mut context = normalize(raw, fs);
    context.source_offset = offset;
    let future_raw = signal.slice(s![offset + context_len..offset + context_len + pred_len, ..]);
    let future = apply_stats(future_raw, &context.norm_stats);
    Ok(SegmentPair { context, future })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub target_fs: f64,
    pub segment_len: usize,
    pub pred_len: usize,
    pub notch_hz: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_fs: TARGET_FS,
            segment_len: SEGMENT_LEN,
            pred_len: PRED_LEN,
            notch_hz: 50.0,
        }
    }
}

/// Resample, clean, then pick the best context window that still leaves
/// room for the prediction target.
pub fn preprocess_record(record: &EcgRecord, cfg: &PreprocessConfig) -> Result<SegmentPair> {
    let resampled = resample(record.samples.view(), record.fs, cfg.target_fs)?;
    let cleaned = clean(resampled.view(), cfg.target_fs, cfg.notch_hz)?;
    let usable = cleaned.nrows().saturating_sub(cfg.pred_len);
    let window = select_window_within(cleaned.view(), cfg.target_fs, cfg.segment_len, usable)?;
    make_pair(
        cleaned.view(),
        cfg.target_fs,
        window.offset,
        cfg.segment_len,
        cfg.pred_len,
    )
}

/// Reshapes `T x C` into `t x (f*C)`, row `i` holding samples
/// `[i*f, (i+1)*f)` of every lead in time-major order.
pub fn patchify<A: Clone>(segment: ArrayView2<A>, frame: usize) -> Result<Array2<A>> {
    let (t_len, leads) = segment.dim();
    if frame == 0 || t_len % frame != 0 {
        return Err(Error::Shape(format!(
            "segment length T={t_len} is not divisible by patch size f={frame}"
        )));
    }
    let flat: Vec<A> = segment.iter().cloned().collect();
    Ok(Array2::from_shape_vec((t_len / frame, frame * leads), flat).expect("sizes agree"))
}

/// Inverse of [`patchify`].
pub fn unpatchify<A: Clone>(patches: ArrayView2<A>, leads: usize) -> Result<Array2<A>> {
    let (t, width) = patches.dim();
    if leads == 0 || width % leads != 0 {
        return Err(Error::Shape(format!(
            "patch width {width} is not a multiple of {leads} leads"
        )));
    }
    let flat: Vec<A> = patches.iter().cloned().collect();
    Ok(Array2::from_shape_vec((t * width / leads, leads), flat).expect("sizes agree"))
}
