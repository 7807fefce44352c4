use serde::{Deserialize, Serialize};

use crate::causal::{CausalForestOptions, CausalTreeOptions, Pruning};
use crate::ensemble::{EnsembleForestOptions, EnsembleTreeOptions};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tree::TreeOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// `U_k = 0` for odd sites, 1 for even sites.
    Discrete,
    /// `U_k ~ Unif[0, 1]`.
    Continuous,
    /// `U_k ~ Unif[0, 3]`, heterogeneity term `(x1 - 3) * U_k^power_c`.
    NonlinearPower,
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::Discrete => "discrete",
            Grouping::Continuous => "continuous",
            Grouping::NonlinearPower => "nonlinear_power",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// `e(x) = 0.5`.
    Experimental,
    /// `e(x) = expit(0.6 * x1)`.
    Observational,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensitySpec {
    /// Sites use the true assignment probability.
    OracleHalf,
    /// Logistic regression on `x1`.
    LogisticCorrect,
    /// Logistic regression on every feature.
    LogisticMisspecified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalKind {
    CausalTree,
    CausalForest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalPruning {
    Cv,
    Unpruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SiteSizes {
    Uniform(usize),
    PerSite(Vec<usize>),
}

/// A simulation scenario. Every field has a default, so a config file only
/// lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    #[serde(alias = "K")]
    pub k: usize,
    pub n_per_site: SiteSizes,
    #[serde(alias = "D")]
    pub d: usize,
    pub grouping: Grouping,
    pub c: f64,
    /// Exponent of the nonlinear variant; `None` uses `c`.
    pub power_c: Option<f64>,
    pub design: Design,
    pub propensity_spec: PropensitySpec,
    pub n_test: usize,
    pub replications: usize,
    pub base_seed: u64,
    pub local_kind: LocalKind,
    pub weighted_by_site_size: bool,

    pub local_min_leaf: usize,
    pub local_pruning: LocalPruning,
    pub local_folds: usize,
    pub local_forest_trees: usize,
    pub ensemble_min_leaf: usize,
    /// Minimum split gain of the ensemble tree as a fraction of the root SSE.
    pub ensemble_min_gain: f64,
    pub ensemble_folds: usize,
    pub forest_trees: usize,
    pub forest_subject_fraction: f64,
    pub forest_min_leaf: usize,
    /// Minimum split gain of forest trees as a fraction of each tree's root SSE.
    pub forest_min_gain: f64,
    /// Columns tried per split; `None` tries all `d + 1`.
    pub forest_mtry: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k: 20,
            n_per_site: SiteSizes::Uniform(500),
            d: 5,
            grouping: Grouping::Discrete,
            c: 0.0,
            power_c: None,
            design: Design::Experimental,
            propensity_spec: PropensitySpec::OracleHalf,
            n_test: 2000,
            replications: 100,
            base_seed: 20_240_601,
            local_kind: LocalKind::CausalTree,
            weighted_by_site_size: false,
            local_min_leaf: 17,
            local_pruning: LocalPruning::Unpruned,
            local_folds: 5,
            local_forest_trees: 200,
            ensemble_min_leaf: 5,
            ensemble_min_gain: 0.02,
            ensemble_folds: 5,
            forest_trees: 2000,
            forest_subject_fraction: 0.9,
            forest_min_leaf: 1,
            forest_min_gain: 0.0,
            forest_mtry: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::InvalidConfig(format!("{key}: {why}")));
        if self.k < 2 {
            return bad("k", "at least two sites are required");
        }
        if self.d < 4 {
            return bad("d", "the outcome model uses four features, so d must be at least 4");
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return bad("c", "must be finite and non-negative");
        }
        if let Some(p) = self.power_c {
            if !(p.is_finite() && p >= 0.0) {
                return bad("power_c", "must be finite and non-negative");
            }
        }
        if self.n_test == 0 {
            return bad("n_test", "must be at least 1");
        }
        if self.replications == 0 {
            return bad("replications", "must be at least 1");
        }
        match &self.n_per_site {
            SiteSizes::Uniform(n) if *n < 4 => return bad("n_per_site", "each site needs at least 4 subjects"),
            SiteSizes::PerSite(v) if v.len() != self.k => {
                return bad("n_per_site", "list length must equal k");
            }
            SiteSizes::PerSite(v) if v.iter().any(|&n| n < 4) => {
                return bad("n_per_site", "each site needs at least 4 subjects");
            }
            _ => {}
        }
        if self.local_min_leaf == 0 || self.ensemble_min_leaf == 0 || self.forest_min_leaf == 0 {
            return bad("min_leaf", "leaf sizes must be at least 1");
        }
        if self.local_folds < 2 || self.ensemble_folds < 2 {
            return bad("folds", "cross-validation needs at least 2 folds");
        }
        if !(self.ensemble_min_gain.is_finite() && self.ensemble_min_gain >= 0.0) {
            return bad("ensemble_min_gain", "must be finite and non-negative");
        }
        if !(self.forest_min_gain.is_finite() && self.forest_min_gain >= 0.0) {
            return bad("forest_min_gain", "must be finite and non-negative");
        }
        if self.forest_trees == 0 || self.local_forest_trees == 0 {
            return bad("forest_trees", "must be at least 1");
        }
        if !(self.forest_subject_fraction > 0.0 && self.forest_subject_fraction < 1.0) {
            return bad("forest_subject_fraction", "must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn site_size(&self, site: usize) -> usize {
        match &self.n_per_site {
            SiteSizes::Uniform(n) => *n,
            SiteSizes::PerSite(v) => v[site - 1],
        }
    }

    pub(crate) fn local_tree_options(&self) -> CausalTreeOptions {
        CausalTreeOptions {
            tree: TreeOptions {
                min_leaf: self.local_min_leaf,
                ..TreeOptions::default()
            },
            pruning: match self.local_pruning {
                LocalPruning::Cv => Pruning::CrossValidated {
                    folds: self.local_folds,
                },
                LocalPruning::Unpruned => Pruning::Unpruned,
            },
        }
    }

    pub(crate) fn local_forest_options(&self, execution: Execution) -> CausalForestOptions {
        CausalForestOptions {
            n_trees: self.local_forest_trees,
            tree: TreeOptions {
                min_leaf: self.local_min_leaf,
                ..TreeOptions::default()
            },
            execution,
            ..CausalForestOptions::default()
        }
    }

    pub(crate) fn ensemble_tree_options(&self) -> EnsembleTreeOptions {
        EnsembleTreeOptions {
            tree: TreeOptions {
                min_leaf: self.ensemble_min_leaf,
                min_gain_fraction: self.ensemble_min_gain,
                ..TreeOptions::default()
            },
            folds: self.ensemble_folds,
        }
    }

    pub(crate) fn ensemble_forest_options(&self, execution: Execution) -> EnsembleForestOptions {
        EnsembleForestOptions {
            n_trees: self.forest_trees,
            subject_fraction: self.forest_subject_fraction,
            mtry: Some(self.forest_mtry.unwrap_or(self.d + 1)),
            tree: TreeOptions {
                min_leaf: self.forest_min_leaf,
                min_gain_fraction: self.forest_min_gain,
                ..TreeOptions::default()
            },
            execution,
            ..EnsembleForestOptions::default()
        }
    }
}
