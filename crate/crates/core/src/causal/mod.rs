//! Per-site CATE estimation: honest causal trees and forests, plus the
//! logistic propensity model used under observational designs.

mod fit;
mod propensity;

pub use fit::{
    fit_causal_forest, fit_causal_tree, CausalForestOptions, CausalTreeOptions, Pruning,
};
pub use propensity::{fit_propensity, Propensity, PropensityModel};

use crate::error::{Error, Result};
use crate::tree::{FeatureMatrix, FittedTree};

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub x: Vec<f64>,
    pub z: bool,
    pub y: f64,
}

/// Train/estimation partition of a site's subjects.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SitePartition {
    pub train_idx: Vec<usize>,
    pub estimate_idx: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteDataset {
    /// 1-based site index; site 1 is the target.
    pub site_id: usize,
    pub records: Vec<SubjectRecord>,
    pub split: Option<SitePartition>,
}

impl SiteDataset {
    pub fn new(site_id: usize, records: Vec<SubjectRecord>) -> Self {
        Self {
            site_id,
            records,
            split: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.len())
    }

    pub fn n_treated(&self) -> usize {
        self.records.iter().filter(|r| r.z).count()
    }

    pub fn features(&self) -> Result<FeatureMatrix> {
        let rows: Vec<&[f64]> = self.records.iter().map(|r| r.x.as_slice()).collect();
        FeatureMatrix::numeric(&rows)
    }

    /// The records at `idx`, in that order, as a new dataset of the same site.
    pub fn subset(&self, idx: &[usize]) -> SiteDataset {
        SiteDataset::new(self.site_id, idx.iter().map(|&i| self.records[i].clone()).collect())
    }

    pub fn train_set(&self) -> Option<SiteDataset> {
        self.split.as_ref().map(|s| self.subset(&s.train_idx))
    }

    pub fn estimation_set(&self) -> Option<SiteDataset> {
        self.split.as_ref().map(|s| self.subset(&s.estimate_idx))
    }
}

/// Anything that maps a feature row to a treatment-effect prediction for a
/// site: fitted local models as well as ground-truth evaluators.
pub trait CateModel: Send + Sync {
    fn site_id(&self) -> usize;
    fn n_features(&self) -> usize;
    fn predict_tau(&self, x: &[f64]) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalModelKind {
    CausalTree,
    CausalForest,
}

impl LocalModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LocalModelKind::CausalTree => "causal_tree",
            LocalModelKind::CausalForest => "causal_forest",
        }
    }
}

/// Sizes of the structure and estimation samples behind one honest tree,
/// plus the indices themselves while the model is still at its home site.
/// Only the counts are ever exported.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TreeHonesty {
    pub structure_count: usize,
    pub estimate_count: usize,
    pub structure_idx: Vec<usize>,
    pub estimate_idx: Vec<usize>,
}

impl TreeHonesty {
    pub fn counts(structure_count: usize, estimate_count: usize) -> Self {
        Self {
            structure_count,
            estimate_count,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalCateModel {
    pub site_id: usize,
    pub kind: LocalModelKind,
    pub trees: Vec<FittedTree>,
    pub honesty: Vec<TreeHonesty>,
}

impl LocalCateModel {
    pub fn predict_tau(&self, x: &[f64]) -> Result<f64> {
        let width = self.n_features();
        if x.len() != width {
            return Err(Error::WidthMismatch {
                expected: width,
                got: x.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict_unchecked(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn n_features(&self) -> usize {
        self.trees.first().map_or(0, |t| t.n_features())
    }
}

impl CateModel for LocalCateModel {
    fn site_id(&self) -> usize {
        self.site_id
    }

    fn n_features(&self) -> usize {
        LocalCateModel::n_features(self)
    }

    fn predict_tau(&self, x: &[f64]) -> Result<f64> {
        LocalCateModel::predict_tau(self, x)
    }
}
