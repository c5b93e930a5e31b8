//! Central finite differences against the analytic backward pass.
//!
//! Quantizer assignments and stop-gradient values are frozen at the base
//! point, so the checked function is smooth in every parameter.

use ndarray::Array2;

use super::forward::{backward, forward, QuantMode};
use super::params::BeatParams;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub array: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|)` among entries above the absolute floor.
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Differences below this are accepted regardless of the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

fn set_entry(p: &mut BeatParams<f64>, array: usize, index: usize, value: f64) -> f64 {
    let mut arrays = p.arrays_mut();
    let slot = arrays[array].1.as_slice_mut().expect("parameters are contiguous");
    std::mem::replace(&mut slot[index], value)
}

/// Checks every entry of every learnable array.
pub fn check_gradients(
    params: &BeatParams<f64>,
    x: &Array2<f64>,
    future: &Array2<f64>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, base) = forward(params, x.view(), future.view(), QuantMode::Live)?;
    let analytic = backward(params, &base);
    let frozen = base.dvq;
    let grads: Vec<Vec<f64>> = analytic
        .arrays()
        .iter()
        .map(|(_, a)| a.iter().copied().collect())
        .collect();
    let names: Vec<String> = params.arrays().into_iter().map(|(n, _)| n).collect();
    let mut p = params.clone();
    let loss_at = |p: &BeatParams<f64>| -> Result<f64> {
        Ok(forward(p, x.view(), future.view(), QuantMode::Frozen(&frozen))?.0.total)
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        mismatches: Vec::new(),
    };
    for (k, name) in names.iter().enumerate() {
        for (i, &a) in grads[k].iter().enumerate() {
            let orig = set_entry(&mut p, k, i, 0.0);
            set_entry(&mut p, k, i, orig + opts.step);
            let plus = loss_at(&p)?;
            set_entry(&mut p, k, i, orig - opts.step);
            let minus = loss_at(&p)?;
            set_entry(&mut p, k, i, orig);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = (a - numeric).abs();
            report.checked += 1;
            if err <= opts.abs_floor {
                continue;
            }
            let rel = err / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > opts.rel_tol {
                report.mismatches.push(GradMismatch {
                    array: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
