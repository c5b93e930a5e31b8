//! Reconstruction/prediction losses, codebook utilization, the weighted
//! score and the configuration ablation table.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward_losses, BeatConfig, BeatParams};
use crate::preprocess::SegmentPair;
use crate::quantizer::{utilization, UsageStats};
use crate::synth::{make_dataset, SynthConfig};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss_r: f64,
    pub loss_p: f64,
    pub utilization_pct: f64,
}

/// Mean reconstruction and prediction MSE over the set, plus utilization
/// from a fresh count of assignments.
pub fn eval_model(params: &BeatParams<f32>, set: &[SegmentPair]) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let cfg = &params.config;
    let per_pair = set
        .par_iter()
        .map(|p| {
            let (loss, cache) = forward_losses(params, p)?;
            let codes: Vec<(usize, Option<usize>)> =
                cache.dvq.iter().map(|r| (r.core_index, r.residual_index)).collect();
            Ok((loss, codes))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stats = UsageStats::new(cfg.k1, cfg.residual_size());
    let (mut lr, mut lp) = (0.0, 0.0);
    for (loss, codes) in &per_pair {
        lr += loss.recon;
        lp += loss.pred;
        for &(c, r) in codes {
            stats.record(c, r);
        }
    }
    let n = set.len() as f64;
    Ok(EvalMetrics {
        loss_r: lr / n,
        loss_p: lp / n,
        utilization_pct: utilization(&stats, cfg.k1, cfg.residual_size())?,
    })
}

/// `(0.2 util/100 + 0.4 base_r/loss_r + 0.4 base_p/loss_p) * 100`.
pub fn score(utilization_pct: f64, loss_r: f64, loss_p: f64, loss_r_base: f64, loss_p_base: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&utilization_pct) {
        return Err(Error::Invalid(format!("utilization {utilization_pct} outside [0, 100]")));
    }
    for (name, v) in [
        ("loss_r", loss_r),
        ("loss_p", loss_p),
        ("loss_r_base", loss_r_base),
        ("loss_p_base", loss_p_base),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Invalid(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok((0.2 * utilization_pct / 100.0 + 0.4 * loss_r_base / loss_r + 0.4 * loss_p_base / loss_p) * 100.0)
}

/// One modification of the base configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Levels(usize),
    /// Size of each codebook.
    CodebookSize(usize),
    /// Context length `T`; the dataset is regenerated at this length.
    TotalLength(usize),
}

impl Variant {
    pub fn apply(&self, base: &BeatConfig) -> BeatConfig {
        let mut c = base.clone();
        match *self {
            Variant::Levels(l) => c.levels = l,
            Variant::CodebookSize(k) => {
                c.k1 = k;
                c.k2 = k;
            }
            Variant::TotalLength(t) => c.context_len = t,
        }
        c
    }
}

/// The five modifications of the standard ablation table, with their labels.
pub fn standard_variants(base: &BeatConfig) -> Vec<(String, Variant)> {
    vec![
        ("w/o DVQ Structure".into(), Variant::Levels(1)),
        ("Larger Codebook".into(), Variant::CodebookSize(base.k1 * 2)),
        ("Smaller Codebook".into(), Variant::CodebookSize((base.k1 / 2).max(1))),
        ("Longer Input".into(), Variant::TotalLength(base.context_len * 2)),
        ("Shorter Input".into(), Variant::TotalLength(base.context_len / 2)),
    ]
}

pub const BASE_LABEL: &str = "Original Model";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub configuration: String,
    pub config: BeatConfig,
    pub utilization_pct: f64,
    pub loss_r: f64,
    pub loss_p: f64,
    pub score: f64,
}

/// Data source for an ablation run; every variant trains on data generated
/// from the same seeds at its own context length.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl AblationData {
    pub fn generate(&self, config: &BeatConfig) -> Result<(Vec<SegmentPair>, Vec<SegmentPair>)> {
        let train_set = make_dataset(self.n_train, &self.synth, config.context_len, config.pred_len, self.seed)?;
        let eval_set = make_dataset(
            self.n_eval,
            &self.synth,
            config.context_len,
            config.pred_len,
            self.seed.wrapping_add(1),
        )?;
        Ok((train_set, eval_set))
    }
}

/// Trains the base configuration and each variant with the same budget and
/// seed. The first row is the base, whose losses are the score baselines.
pub fn run_ablation(
    base: &BeatConfig,
    opts: &TrainConfig,
    data: &AblationData,
    variants: &[(String, Variant)],
) -> Result<Vec<EvalReport>> {
    let mut runs = vec![(BASE_LABEL.to_string(), base.clone())];
    for (label, v) in variants {
        let cfg = v.apply(base);
        cfg.validate()?;
        runs.push((label.clone(), cfg));
    }
    let mut measured = Vec::with_capacity(runs.len());
    for (label, cfg) in runs {
        let (train_set, eval_set) = data.generate(&cfg)?;
        let (params, _) = train(&cfg, opts, &train_set, &eval_set)?;
        let m = eval_model(&params, &eval_set)?;
        measured.push((label, cfg, m));
    }
    let (base_r, base_p) = (measured[0].2.loss_r, measured[0].2.loss_p);
    measured
        .into_iter()
        .map(|(configuration, config, m)| {
            Ok(EvalReport {
                configuration,
                config,
                utilization_pct: m.utilization_pct,
                loss_r: m.loss_r,
                loss_p: m.loss_p,
                score: score(m.utilization_pct, m.loss_r, m.loss_p, base_r, base_p)?,
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str =
    "configuration,residual_levels,codebook_size,total_length,utilization_pct,loss_r,loss_p,score";

/// CSV with a leading `#` line naming the baseline row.
pub fn ablation_csv(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    if let Some(base) = reports.first() {
        writeln!(
            s,
            "# score baselines from \"{}\": loss_r={} loss_p={}",
            base.configuration, base.loss_r, base.loss_p
        )
        .expect("writing to a string");
    }
    writeln!(s, "{ABLATION_HEADER}").expect("writing to a string");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{:.2},{:.4},{:.4},{:.2}",
            r.configuration,
            r.config.levels,
            r.config.k1,
            r.config.context_len,
            r.utilization_pct,
            r.loss_r,
            r.loss_p,
            r.score
        )
        .expect("writing to a string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_baselines_give_eighty_plus_util() {
        for u in [0.0, 12.5, 72.82, 100.0] {
            let s = score(u, 0.4, 0.9, 0.4, 0.9).unwrap();
            assert!((s - (0.2 * u + 80.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(score(101.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(score(50.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(score(50.0, 1.0, f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn monotone_in_each_argument() {
        let s = |u, r, p| score(u, r, p, 0.3, 0.8).unwrap();
        assert!(s(50.0, 0.3, 0.8) > s(50.0, 0.31, 0.8));
        assert!(s(50.0, 0.3, 0.8) > s(50.0, 0.3, 0.81));
        assert!(s(51.0, 0.3, 0.8) > s(50.0, 0.3, 0.8));
    }

    #[test]
    fn variants_modify_one_field() {
        let base = BeatConfig::default();
        let v = standard_variants(&base);
        assert_eq!(v.len(), 5);
        assert_eq!(v[0].1.apply(&base).levels, 1);
        assert_eq!(v[1].1.apply(&base).k2, 512);
        assert_eq!(v[2].1.apply(&base).k1, 128);
        assert_eq!(v[3].1.apply(&base).context_len, 1000);
        assert_eq!(v[4].1.apply(&base).context_len, 250);
    }
}
