//! Smoothing Quality Measure: per-component ratios of empirical to
//! theoretical prediction-error variance, aggregated by geometric mean,
//! plus the rule for selecting the best run among the first iteration
//! and the second iterations with different correlation limits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoother::FilterPass;
use crate::statespace::NoiseModel;

/// Quality report of one smoother run.
///
/// `sqm` is the geometric mean of the included component ratios; a run
/// with `sqm > 10` is abnormal. `complete` is false when a component had
/// to be excluded (fewer than two measured steps). A run that failed
/// outright carries the reason in `failure` and no ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SqmReport {
    pub run_label: String,
    pub ratios: Vec<Option<f64>>,
    pub sqm: f64,
    pub abnormal: bool,
    pub complete: bool,
    pub degenerate: bool,
    pub failure: Option<String>,
}

impl SqmReport {
    /// Report for a run that did not produce a smoothing result.
    pub fn failed(run_label: &str, reason: &str) -> Self {
        Self {
            run_label: run_label.to_string(),
            ratios: Vec::new(),
            sqm: f64::NAN,
            abnormal: false,
            complete: false,
            degenerate: false,
            failure: Some(reason.to_string()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Theoretical innovation covariance at step `k`:
/// `S_k = C_k P~_k C_k^T + R_k`, with the `R_k` actually applied there.
pub fn innovation_covariance(fp: &FilterPass, noise: &NoiseModel, k: usize) -> DMatrix<f64> {
    let step = &fp.steps[k];
    &step.c_jac * &step.p_pred * step.c_jac.transpose() + noise.r_schedule.at(k)
}

/// Diagonal of `S_k` for every step, computed in one sweep.
pub fn innovation_variances(fp: &FilterPass, noise: &NoiseModel) -> Vec<Vec<f64>> {
    let n_y = noise.r_schedule.dim();
    (0..fp.len())
        .map(|k| {
            let step = &fp.steps[k];
            let cp = &step.c_jac * &step.p_pred;
            let r = noise.r_schedule.at(k);
            (0..n_y)
                .map(|i| {
                    let mut s = r[(i, i)];
                    for (a, b) in cp.row(i).iter().zip(step.c_jac.row(i).iter()) {
                        s += a * b;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn ratio_from_series(innovations: &[Option<f64>], s_ii: &[f64]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = innovations
        .iter()
        .zip(s_ii)
        .filter_map(|(e, &s)| e.map(|e| (e, s)))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|(e, _)| e).sum::<f64>() / n;
    Some(
        pairs
            .iter()
            .map(|(e, s)| (e - mean).powi(2) / s)
            .sum::<f64>()
            / n,
    )
}

/// Ratio of empirical to theoretical prediction-error variance for one
/// output component: `r_i = (1/N) sum_k (eps_k,i - mean)^2 / S_k,ii`,
/// restricted to the steps where the component was measured. Returns
/// `None` (excluded) when fewer than two steps are measured.
pub fn component_ratio(fp: &FilterPass, noise: &NoiseModel, i: usize) -> Option<f64> {
    let innovations: Vec<Option<f64>> = fp.steps.iter().map(|step| step.innovation[i]).collect();
    let s_ii: Vec<f64> = (0..fp.len())
        .map(|k| {
            let step = &fp.steps[k];
            let row = step.c_jac.row(i);
            let mut s = noise.r_schedule.at(k)[(i, i)];
            s += (&row * &step.p_pred * row.transpose())[(0, 0)];
            s
        })
        .collect();
    ratio_from_series(&innovations, &s_ii)
}

/// Geometric mean of positive ratios, `exp(mean(ln r_i))`.
fn geometric_mean(ratios: &[f64]) -> f64 {
    let n = ratios.len() as f64;
    (ratios.iter().map(|r| r.ln()).sum::<f64>() / n).exp()
}

/// Aggregate per-component ratios into an [`SqmReport`].
pub fn sqm_from_ratios(run_label: &str, ratios: Vec<Option<f64>>) -> Result<SqmReport> {
    let included: Vec<f64> = ratios.iter().filter_map(|r| *r).collect();
    if included.is_empty() {
        return Err(Error::Argument(
            "SQM needs at least one included component".into(),
        ));
    }
    let complete = ratios.iter().all(|r| r.is_some());
    let degenerate = included.iter().any(|&r| r == 0.0);
    let sqm = if degenerate {
        0.0
    } else {
        geometric_mean(&included)
    };
    Ok(SqmReport {
        run_label: run_label.to_string(),
        ratios,
        sqm,
        abnormal: sqm > 10.0,
        complete,
        degenerate,
        failure: None,
    })
}

/// Compute the full SQM report of one smoother run.
pub fn compute_sqm(fp: &FilterPass, noise: &NoiseModel, run_label: &str) -> Result<SqmReport> {
    let s = innovation_variances(fp, noise);
    let n_y = noise.r_schedule.dim();
    let ratios: Vec<Option<f64>> = (0..n_y)
        .map(|i| {
            let innovations: Vec<Option<f64>> =
                fp.steps.iter().map(|step| step.innovation[i]).collect();
            let s_ii: Vec<f64> = s.iter().map(|row| row[i]).collect();
            ratio_from_series(&innovations, &s_ii)
        })
        .collect();
    sqm_from_ratios(run_label, ratios)
}

/// Outcome of [`select_best`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub index: usize,
    /// True when no complete run existed and the pick fell back to the
    /// incomplete ones.
    pub used_incomplete: bool,
}

/// Distance of an SQM value from the ideal 1 on the multiplicative
/// scale; 0.5 and 2.0 are equally far.
fn log_distance(sqm: f64) -> f64 {
    if sqm > 0.0 && sqm.is_finite() {
        sqm.ln().abs()
    } else {
        f64::INFINITY
    }
}

/// Pick the run whose SQM is closest to 1, preferring complete runs.
/// Failed runs never win. Ties go to the earliest run in the list (the
/// first iteration precedes the second iterations, which are ordered by
/// ascending correlation limit).
pub fn select_best(reports: &[SqmReport]) -> Result<Selection> {
    if reports.is_empty() {
        return Err(Error::Argument("no runs to select from".into()));
    }
    let pick = |complete_only: bool| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, rep) in reports.iter().enumerate() {
            if rep.is_failed() || (complete_only && !rep.complete) {
                continue;
            }
            let d = log_distance(rep.sqm);
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((i, d)),
            }
        }
        best.map(|(i, _)| i)
    };
    if let Some(index) = pick(true) {
        return Ok(Selection {
            index,
            used_incomplete: false,
        });
    }
    if let Some(index) = pick(false) {
        return Ok(Selection {
            index,
            used_incomplete: true,
        });
    }
    Err(Error::Argument("all runs failed".into()))
}
