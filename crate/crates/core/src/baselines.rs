//! Comparison estimators: the target's local model, equal-weight and
//! exponentially weighted averages, linear stacking, and ground-truth
//! stand-ins for the local models.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::causal::{fit_causal_tree, CateModel, CausalTreeOptions, LocalCateModel, Propensity, SiteDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightScheme {
    Ma,
    Ewma,
    EwmaOracle,
    Stack,
    StackOracle,
}

impl WeightScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightScheme::Ma => "MA",
            WeightScheme::Ewma => "EWMA",
            WeightScheme::EwmaOracle => "EWMA-oracle",
            WeightScheme::Stack => "STACK",
            WeightScheme::StackOracle => "STACK-oracle",
        }
    }
}

/// Global (x-independent) weights over the K site models, in site order.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragingWeights {
    pub scheme: WeightScheme,
    pub values: Vec<f64>,
    /// True when the values are a probability vector.
    pub constrained_simplex: bool,
}

/// Honest causal tree on all of the target's data, both halves merged.
pub fn loc_fit<R: RngCore>(
    target: &SiteDataset,
    prop: Option<&Propensity>,
    opts: &CausalTreeOptions,
    rng: &mut R,
) -> Result<LocalCateModel> {
    let full = SiteDataset::new(target.site_id, target.records.clone());
    fit_causal_tree(&full, prop, opts, rng)
}

pub fn ma_weights(k: usize) -> AveragingWeights {
    AveragingWeights {
        scheme: WeightScheme::Ma,
        values: vec![1.0 / k as f64; k],
        constrained_simplex: true,
    }
}

fn prediction_columns(models: &[&dyn CateModel], xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    models
        .iter()
        .map(|m| xs.iter().map(|x| m.predict_tau(x)).collect())
        .collect()
}

fn check_reference(reference: &[f64], xs: &[Vec<f64>]) -> Result<()> {
    if reference.len() != xs.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            got: reference.len(),
        });
    }
    Ok(())
}

/// Softmax over `-SSE_k`, the squared distance of each model's predictions
/// to `reference` summed over the points `xs`.
///
/// `scheme` only labels the result: EWMA and its oracle differ solely in
/// the reference passed in.
pub fn ewma_weights(
    models: &[&dyn CateModel],
    reference: &[f64],
    xs: &[Vec<f64>],
    scheme: WeightScheme,
) -> Result<AveragingWeights> {
    if models.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_reference(reference, xs)?;
    let sse: Vec<f64> = prediction_columns(models, xs)?
        .iter()
        .map(|col| col.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum())
        .collect();
    Ok(AveragingWeights {
        scheme,
        values: softmax_neg(&sse),
        constrained_simplex: true,
    })
}

fn softmax_neg(sse: &[f64]) -> Vec<f64> {
    let best = sse.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = sse.iter().map(|s| (best - s).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Least squares of `reference` on the K prediction columns, no intercept.
/// Rank-deficient designs get the minimum-norm solution.
pub fn stack_fit(
    models: &[&dyn CateModel],
    reference: &[f64],
    xs: &[Vec<f64>],
    scheme: WeightScheme,
) -> Result<AveragingWeights> {
    if models.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_reference(reference, xs)?;
    let cols = prediction_columns(models, xs)?;
    let (n, k) = (xs.len(), models.len());
    let a = DMatrix::from_fn(n, k, |i, j| cols[j][i]);
    let b = DVector::from_column_slice(reference);
    let svd = a.svd(true, true);
    let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = top * n.max(k) as f64 * f64::EPSILON;
    let beta = if top == 0.0 {
        DVector::zeros(k)
    } else {
        svd.solve(&b, eps).map_err(|e| Error::InvalidMatrix(e.to_string()))?
    };
    Ok(AveragingWeights {
        scheme,
        values: beta.iter().copied().collect(),
        constrained_simplex: false,
    })
}

pub fn averaged_predict(weights: &AveragingWeights, models: &[&dyn CateModel], x: &[f64]) -> Result<f64> {
    if weights.values.len() != models.len() {
        return Err(Error::LengthMismatch {
            expected: models.len(),
            got: weights.values.len(),
        });
    }
    models
        .iter()
        .zip(&weights.values)
        .try_fold(0.0, |acc, (m, w)| Ok(acc + w * m.predict_tau(x)?))
}

pub type TruthFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A known CATE function posing as a site model.
#[derive(Clone)]
pub struct OracleModel {
    pub site_id: usize,
    pub n_features: usize,
    pub tau: TruthFn,
}

impl std::fmt::Debug for OracleModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleModel")
            .field("site_id", &self.site_id)
            .field("n_features", &self.n_features)
            .finish_non_exhaustive()
    }
}

impl CateModel for OracleModel {
    fn site_id(&self) -> usize {
        self.site_id
    }

    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_tau(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::WidthMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok((self.tau)(x))
    }
}

/// One oracle per site, `truth[k - 1]` for site `k`.
pub fn oracle_models(truth: Vec<TruthFn>, n_features: usize) -> Vec<OracleModel> {
    truth
        .into_iter()
        .enumerate()
        .map(|(k, tau)| OracleModel {
            site_id: k + 1,
            n_features,
            tau,
        })
        .collect()
}
