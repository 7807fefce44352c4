use std::collections::BTreeMap;

use super::run::{Estimator, ReplicateResult};
use crate::causal::{Propensity, SiteDataset};
use crate::error::{Error, Result};

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

/// Treat exactly when the estimated effect is positive.
pub fn decision_rule(tau_hat: &[f64]) -> Vec<bool> {
    tau_hat.iter().map(|&t| t > 0.0).collect()
}

/// Inverse-propensity-weighted mean outcome among subjects whose observed
/// treatment agrees with `decisions`, normalised by the total weight.
pub fn ipw_value(test: &SiteDataset, decisions: &[bool], prop: &Propensity) -> Result<f64> {
    if decisions.len() != test.len() {
        return Err(Error::LengthMismatch {
            expected: test.len(),
            got: decisions.len(),
        });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (r, &d) in test.records.iter().zip(decisions) {
        if r.z == d {
            let w = 1.0 / prop.prob_of(r.z, &r.x);
            num += w * r.y;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::NoConsistentSubjects);
    }
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub estimator: Estimator,
    pub replicates: usize,
    pub mean_mse: f64,
    pub sd_mse: f64,
    /// Mean MSE over mean LOC MSE.
    pub mean_ratio: f64,
    /// Standard deviation of MSE over that of LOC.
    pub sd_ratio: f64,
    /// Quantiles of the per-replicate MSE ratios.
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One row per estimator present in every replicate, in estimator order.
pub fn summarize(results: &[ReplicateResult]) -> Vec<SummaryRow> {
    if results.is_empty() {
        return Vec::new();
    }
    let mut series: BTreeMap<Estimator, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in results {
        for (&e, &m) in &r.mse {
            let entry = series.entry(e).or_default();
            entry.0.push(m);
            entry.1.push(r.ratio[&e]);
        }
    }
    let Some((loc_mse, _)) = series.get(&Estimator::Loc).cloned() else {
        return Vec::new();
    };
    let (loc_mean, loc_sd) = (mean(&loc_mse), sd(&loc_mse));
    series
        .into_iter()
        .filter(|(_, (m, _))| m.len() == results.len())
        .map(|(estimator, (m, mut ratios))| {
            ratios.sort_by(f64::total_cmp);
            let sd_ratio = if results.len() == 1 {
                ratios[0]
            } else if estimator == Estimator::Loc {
                1.0
            } else {
                sd(&m) / loc_sd
            };
            SummaryRow {
                estimator,
                replicates: m.len(),
                mean_mse: mean(&m),
                sd_mse: sd(&m),
                mean_ratio: if estimator == Estimator::Loc { 1.0 } else { mean(&m) / loc_mean },
                sd_ratio,
                q25: quantile(&ratios, 0.25),
                q50: quantile(&ratios, 0.5),
                q75: quantile(&ratios, 0.75),
            }
        })
        .collect()
}
