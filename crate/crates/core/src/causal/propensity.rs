use nalgebra::{DMatrix, DVector};

use super::SiteDataset;
use crate::error::{Error, Result};

const MAX_ITER: usize = 50;
const TOL: f64 = 1e-8;
const DIVERGENCE: f64 = 20.0;
pub const DEFAULT_CLIP: (f64, f64) = (0.01, 0.99);

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logistic model of `P(Z = 1 | X)` over a subset of feature columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PropensityModel {
    pub features: Vec<usize>,
    /// Intercept first, then one slope per entry of `features`.
    pub coefficients: Vec<f64>,
    pub clip: (f64, f64),
    /// Set when IRLS diverged and the model fell back to the clipped
    /// treated fraction.
    pub separation_fallback: bool,
}

impl PropensityModel {
    /// A known logistic propensity, e.g. the true one in a simulation.
    pub fn known(intercept: f64, features: Vec<usize>, slopes: Vec<f64>) -> Self {
        let mut coefficients = vec![intercept];
        coefficients.extend(slopes);
        Self {
            features,
            coefficients,
            clip: DEFAULT_CLIP,
            separation_fallback: false,
        }
    }

    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.coefficients[1..]
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let eta = self.features.iter().zip(self.slopes()).fold(self.intercept(), |acc, (&f, b)| acc + b * x[f]);
        expit(eta).clamp(self.clip.0, self.clip.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Propensity {
    /// Known constant assignment probability (randomised design).
    Constant(f64),
    Logistic(PropensityModel),
}

impl Propensity {
    pub fn score(&self, x: &[f64]) -> f64 {
        match self {
            Propensity::Constant(p) => *p,
            Propensity::Logistic(m) => m.score(x),
        }
    }

    /// Probability of the treatment actually received.
    pub fn prob_of(&self, z: bool, x: &[f64]) -> f64 {
        let e = self.score(x);
        if z {
            e
        } else {
            1.0 - e
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Propensity::Constant(_))
    }
}

/// Logistic regression of `z` on the given columns by iteratively
/// reweighted least squares.
pub fn fit_propensity(data: &SiteDataset, feature_subset: &[usize]) -> Result<PropensityModel> {
    let n = data.len();
    let treated = data.n_treated();
    if treated == 0 || treated == n {
        return Err(Error::PositivityViolation(format!(
            "site {} has {treated} treated of {n}",
            data.site_id
        )));
    }
    if let Some(&f) = feature_subset.iter().find(|&&f| f >= data.n_features()) {
        return Err(Error::InvalidOptions(format!("propensity feature {f} out of range")));
    }
    let q = feature_subset.len() + 1;
    let design = DMatrix::from_fn(n, q, |i, j| {
        if j == 0 {
            1.0
        } else {
            data.records[i].x[feature_subset[j - 1]]
        }
    });
    let z = DVector::from_iterator(n, data.records.iter().map(|r| if r.z { 1.0 } else { 0.0 }));

    let fallback = || {
        let frac = (treated as f64 / n as f64).clamp(DEFAULT_CLIP.0, DEFAULT_CLIP.1);
        PropensityModel {
            features: Vec::new(),
            coefficients: vec![logit(frac)],
            clip: DEFAULT_CLIP,
            separation_fallback: true,
        }
    };

    let mut beta = DVector::zeros(q);
    for _ in 0..MAX_ITER {
        let eta = &design * &beta;
        let p = eta.map(expit);
        let w = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let mut xtwx = DMatrix::zeros(q, q);
        let mut xtwz = DVector::zeros(q);
        for i in 0..n {
            let working = eta[i] + (z[i] - p[i]) / w[i];
            for a in 0..q {
                let xa = design[(i, a)] * w[i];
                xtwz[a] += xa * working;
                for b in 0..q {
                    xtwx[(a, b)] += xa * design[(i, b)];
                }
            }
        }
        let Some(chol) = xtwx.cholesky() else {
            return Ok(fallback());
        };
        let next: DVector<f64> = chol.solve(&xtwz);
        if next.iter().any(|b| !b.is_finite() || b.abs() > DIVERGENCE) {
            return Ok(fallback());
        }
        let delta = (&next - &beta).amax();
        beta = next;
        if delta < TOL {
            break;
        }
    }
    Ok(PropensityModel {
        features: feature_subset.to_vec(),
        coefficients: beta.iter().copied().collect(),
        clip: DEFAULT_CLIP,
        separation_fallback: false,
    })
}
