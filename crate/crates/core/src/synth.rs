//! Synthetic multi-lead ECG built from five Gaussian bumps per beat.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::{self, SegmentPair, TARGET_FS};
use crate::signal_io::EcgRecord;

/// One Gaussian component of the beat template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub amplitude: f64,
    /// Standard deviation in seconds.
    pub width: f64,
    /// Position as a fraction of the beat interval.
    pub center: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub amplitude: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub heart_rate: f64,
    pub fs: f64,
    pub duration: f64,
    pub n_leads: usize,
    /// P, Q, R, S, T in that order.
    pub waves: [Wave; 5],
    pub noise_std: f64,
    pub drift: Drift,
    pub lead_mix: Vec<f64>,
    pub seed: u64,
}

pub const WAVE_NAMES: [&str; 5] = ["p", "q", "r", "s", "t"];

const MIX_PATTERN: [f64; 12] = [1.0, 0.6, -0.4, 0.8, 0.5, -0.3, 0.9, 1.1, 0.7, 0.4, -0.6, 0.3];

pub fn default_lead_mix(n_leads: usize) -> Vec<f64> {
    (0..n_leads).map(|i| MIX_PATTERN[i % MIX_PATTERN.len()]).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            heart_rate: 72.0,
            fs: 500.0,
            duration: 10.0,
            n_leads: 12,
            waves: [
                Wave { amplitude: 0.15, width: 0.025, center: 0.20 },
                Wave { amplitude: -0.10, width: 0.010, center: 0.33 },
                Wave { amplitude: 1.00, width: 0.012, center: 0.36 },
                Wave { amplitude: -0.25, width: 0.012, center: 0.39 },
                Wave { amplitude: 0.30, width: 0.050, center: 0.62 },
            ],
            noise_std: 0.02,
            drift: Drift { amplitude: 0.1, frequency: 0.2 },
            lead_mix: default_lead_mix(12),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Default morphology with `n` leads.
    pub fn with_leads(n: usize) -> Self {
        Self {
            n_leads: n,
            lead_mix: default_lead_mix(n),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.heart_rate > 0.0) {
            return bad(format!("heart_rate {} must be positive", self.heart_rate));
        }
        if !(self.fs > 0.0) {
            return bad(format!("fs {} must be positive", self.fs));
        }
        if !(self.duration > 0.0) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if self.n_leads == 0 {
            return bad("n_leads must be at least 1".into());
        }
        if self.lead_mix.len() != self.n_leads {
            return bad(format!(
                "lead_mix has {} entries for {} leads",
                self.lead_mix.len(),
                self.n_leads
            ));
        }
        if let Some((i, _)) = self.waves.iter().enumerate().find(|(_, w)| !(w.width > 0.0)) {
            return bad(format!("{} wave width must be positive", WAVE_NAMES[i]));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be non-negative", self.noise_std));
        }
        Ok(())
    }

    pub fn beat_len(&self) -> usize {
        ((self.fs * 60.0 / self.heart_rate).round() as usize).max(1)
    }
}

/// One noiseless beat, `fs * 60 / heart_rate` samples long.
pub fn synth_beat_template(config: &SynthConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let n = config.beat_len();
    let beat_s = n as f64 / config.fs;
    Ok((0..n)
        .map(|i| {
            let t = i as f64 / config.fs;
            config
                .waves
                .iter()
                .map(|w| {
                    let d = t - w.center * beat_s;
                    w.amplitude * (-d * d / (2.0 * w.width * w.width)).exp()
                })
                .sum()
        })
        .collect())
}

/// Tiles beats over the configured duration, mixes per lead, adds drift and
/// seeded Gaussian noise.
pub fn synth_record(config: &SynthConfig) -> Result<EcgRecord> {
    let beat = synth_beat_template(config)?;
    let n = (config.duration * config.fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut samples = Array2::zeros((n, config.n_leads));
    for i in 0..n {
        let t = i as f64 / config.fs;
        let base = beat[i % beat.len()];
        let drift = config.drift.amplitude * (2.0 * PI * config.drift.frequency * t).sin();
        for (c, mix) in config.lead_mix.iter().enumerate() {
            let eps = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            samples[[i, c]] = mix * base + drift + eps;
        }
    }
    let names = (0..config.n_leads).map(|i| format!("lead{i}")).collect();
    EcgRecord::new(samples, config.fs, names)
}

/// Draws `n` jittered records and cuts one context/future pair out of each,
/// after resampling to 250 Hz and cleaning.
pub fn make_dataset(
    n: usize,
    config: &SynthConfig,
    context_len: usize,
    pred_len: usize,
    seed: u64,
) -> Result<Vec<SegmentPair>> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let item_seeds: Vec<u64> = (0..n).map(|_| master.next_u64()).collect();
    item_seeds
        .par_iter()
        .map(|&s| make_item(config, context_len, pred_len, s))
        .collect()
}

/// Per-record variation: heart rate scaled by U(0.85, 1.15), noise by U(0.5, 1.5).
fn jitter(config: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthConfig {
    SynthConfig {
        heart_rate: config.heart_rate * rng.random_range(0.85..1.15),
        noise_std: config.noise_std * rng.random_range(0.5..1.5),
        seed: rng.next_u64(),
        ..config.clone()
    }
}

/// `n` jittered raw records at the configured rate, one seed per record
/// drawn from `seed`.
pub fn make_records(n: usize, config: &SynthConfig, seed: u64) -> Result<Vec<EcgRecord>> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            synth_record(&jitter(config, &mut rng))
        })
        .collect()
}

fn make_item(
    config: &SynthConfig,
    context_len: usize,
    pred_len: usize,
    seed: u64,
) -> Result<SegmentPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let record = synth_record(&jitter(config, &mut rng))?;
    let resampled = preprocess::resample(record.samples.view(), record.fs, TARGET_FS)?;
    let cleaned = preprocess::clean(resampled.view(), TARGET_FS, 50.0)?;
    let need = context_len + pred_len;
    if cleaned.nrows() < need {
        return Err(Error::Signal(format!(
            "synthetic record has {} samples after preprocessing, need {need}",
            cleaned.nrows()
        )));
    }
    let offset = rng.random_range(0..=cleaned.nrows() - need);
    preprocess::make_pair(cleaned.view(), TARGET_FS, offset, context_len, pred_len)
}
