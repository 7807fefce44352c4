//! Ensemble stage at the target site.
//!
//! The target predicts every site's model on its own estimation subjects,
//! giving `n_subjects * K` augmented rows `(x_i, k, tau_k(x_i))`. A regression
//! tree (ET) or a forest of honest subsampled trees (EF) is fitted to these
//! rows with the site index as a categorical predictor. Evaluating the fit at
//! site 1 is a model average whose weights are the leaf kernel of the fit:
//! for each tree the augmented rows that share the query's leaf, each with
//! weight `w_r / sum(w)`, averaged over trees.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::causal::{CateModel, SiteDataset, TreeHonesty};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::rng::stream;
use crate::tree::{cv_select_alpha, fit_regression_tree, ColumnKind, FeatureMatrix, FittedTree, TreeOptions};

/// Site index of the target.
pub const TARGET_SITE: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedRow {
    pub x: Vec<f64>,
    /// Position of the subject in the target's estimation set.
    pub subject_idx: usize,
    /// 1-based site whose model produced `tau_hat`.
    pub site_idx: usize,
    pub tau_hat: f64,
    pub row_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset {
    pub rows: Vec<AugmentedRow>,
    pub n_subjects: usize,
    pub n_sites: usize,
    pub n_features: usize,
}

impl AugmentedDataset {
    /// Features plus the site column (level `k - 1`) as the last column.
    pub fn design(&self) -> FeatureMatrix {
        let mut kinds = vec![ColumnKind::Numeric; self.n_features];
        kinds.push(ColumnKind::Categorical {
            levels: self.n_sites as u32,
        });
        let mut values = Vec::with_capacity(self.rows.len() * (self.n_features + 1));
        for r in &self.rows {
            values.extend_from_slice(&r.x);
            values.push((r.site_idx - 1) as f64);
        }
        FeatureMatrix::new(self.rows.len(), self.n_features + 1, values, kinds)
            .expect("augmented rows are validated at construction")
    }

    pub fn responses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.tau_hat).collect()
    }

    /// Row weights, or `None` when every weight is 1.
    pub fn weights(&self) -> Option<Vec<f64>> {
        if self.rows.iter().all(|r| r.row_weight == 1.0) {
            None
        } else {
            Some(self.rows.iter().map(|r| r.row_weight).collect())
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        mix(self.rows.len() as u64);
        mix(self.n_sites as u64);
        for r in &self.rows {
            mix(r.subject_idx as u64);
            mix(r.site_idx as u64);
            mix(r.tau_hat.to_bits());
            mix(r.row_weight.to_bits());
        }
        h
    }

    /// `lookup[i][k - 1]` is the row of subject `i` under site `k`.
    fn grid(&self) -> Result<Vec<Vec<usize>>> {
        let mut grid = vec![vec![usize::MAX; self.n_sites]; self.n_subjects];
        for (r, row) in self.rows.iter().enumerate() {
            let slot = grid
                .get_mut(row.subject_idx)
                .and_then(|s| s.get_mut(row.site_idx.wrapping_sub(1)))
                .ok_or_else(|| Error::InvalidOptions(format!("augmented row {r} is out of range")))?;
            *slot = r;
        }
        if grid.iter().flatten().any(|&r| r == usize::MAX) {
            return Err(Error::InvalidOptions("augmented data is missing (subject, site) rows".into()));
        }
        Ok(grid)
    }
}

/// Stack every site model's predictions on the target's estimation subjects.
///
/// With `site_sizes`, rows of site `k` carry weight `K * n_k / sum_j n_j`.
pub fn build_augmented(
    estimation: &SiteDataset,
    models: &[&dyn CateModel],
    site_sizes: Option<&[f64]>,
) -> Result<AugmentedDataset> {
    let n_sites = models.len();
    if n_sites == 0 {
        return Err(Error::MissingModel(TARGET_SITE));
    }
    let mut by_site: Vec<Option<&dyn CateModel>> = vec![None; n_sites];
    for &m in models {
        let k = m.site_id();
        if k == 0 || k > n_sites {
            return Err(Error::InvalidOptions(format!(
                "model for site {k} outside 1..={n_sites}"
            )));
        }
        by_site[k - 1] = Some(m);
    }
    let by_site: Vec<&dyn CateModel> = by_site
        .into_iter()
        .enumerate()
        .map(|(k, m)| m.ok_or(Error::MissingModel(k + 1)))
        .collect::<Result<_>>()?;

    let eta: Vec<f64> = match site_sizes {
        None => vec![1.0; n_sites],
        Some(sizes) => {
            if sizes.len() != n_sites {
                return Err(Error::LengthMismatch {
                    expected: n_sites,
                    got: sizes.len(),
                });
            }
            let total: f64 = sizes.iter().sum();
            if !(total > 0.0) || sizes.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidOptions("site sizes must be positive".into()));
            }
            sizes.iter().map(|&s| n_sites as f64 * s / total).collect()
        }
    };

    let n_features = estimation.n_features();
    let mut rows = Vec::with_capacity(estimation.len() * n_sites);
    for (i, rec) in estimation.records.iter().enumerate() {
        for (k, m) in by_site.iter().enumerate() {
            let tau_hat = m.predict_tau(&rec.x)?;
            if !tau_hat.is_finite() {
                return Err(Error::InvalidOptions(format!(
                    "site {} model is non-finite at subject {i}",
                    k + 1
                )));
            }
            rows.push(AugmentedRow {
                x: rec.x.clone(),
                subject_idx: i,
                site_idx: k + 1,
                tau_hat,
                row_weight: eta[k],
            });
        }
    }
    Ok(AugmentedDataset {
        rows,
        n_subjects: estimation.len(),
        n_sites,
        n_features,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleKind {
    Tree,
    Forest,
}

impl EnsembleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleKind::Tree => "ensemble_tree",
            EnsembleKind::Forest => "ensemble_forest",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub kind: EnsembleKind,
    pub trees: Vec<FittedTree>,
    /// Per tree, the augmented rows that placed the splits and the rows that
    /// produced the leaf values. Exported models keep only the counts.
    pub samples: Vec<TreeHonesty>,
    pub n_sites: usize,
    pub n_features: usize,
    fitted_on: Option<u64>,
}

impl EnsembleModel {
    pub(crate) fn from_parts(
        kind: EnsembleKind,
        trees: Vec<FittedTree>,
        samples: Vec<TreeHonesty>,
        n_sites: usize,
        n_features: usize,
    ) -> Self {
        Self {
            kind,
            trees,
            samples,
            n_sites,
            n_features,
            fitted_on: None,
        }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Target subjects behind tree `b`, from its recorded rows.
    pub fn subjects_of(&self, b: usize, aug: &AugmentedDataset) -> Vec<usize> {
        let s = &self.samples[b];
        let mut subjects: Vec<usize> = s
            .structure_idx
            .iter()
            .chain(&s.estimate_idx)
            .map(|&r| aug.rows[r].subject_idx)
            .collect();
        subjects.sort_unstable();
        subjects.dedup();
        subjects
    }

    fn query_row(&self, x: &[f64], site: usize) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::WidthMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        let mut q = Vec::with_capacity(x.len() + 1);
        q.extend_from_slice(x);
        q.push((site - 1) as f64);
        Ok(q)
    }

    /// The fitted surface at an arbitrary site, `T(x, s)`.
    pub fn predict_at_site(&self, x: &[f64], site: usize) -> Result<f64> {
        let q = self.query_row(x, site)?;
        let sum: f64 = self.trees.iter().map(|t| t.predict_unchecked(&q)).sum();
        Ok(sum / self.trees.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleTreeOptions {
    pub tree: TreeOptions,
    pub folds: usize,
}

impl Default for EnsembleTreeOptions {
    fn default() -> Self {
        Self {
            tree: TreeOptions::default(),
            folds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleForestOptions {
    pub n_trees: usize,
    pub subject_fraction: f64,
    /// `None` uses `ceil(sqrt(p + 1))`, the site column included.
    pub mtry: Option<usize>,
    pub tree: TreeOptions,
    /// Fit every tree on the full augmented grid with CV pruning and no
    /// honesty. With one tree this reproduces [`fit_ensemble_tree`].
    pub full_grid_compat: bool,
    pub folds: usize,
    pub execution: Execution,
}

impl Default for EnsembleForestOptions {
    fn default() -> Self {
        Self {
            n_trees: 2000,
            subject_fraction: 0.5,
            mtry: None,
            tree: TreeOptions::default(),
            full_grid_compat: false,
            folds: 5,
            execution: Execution::Parallel,
        }
    }
}

fn check_nonempty(aug: &AugmentedDataset) -> Result<()> {
    if aug.rows.is_empty() || aug.n_subjects == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn full_grid_tree(
    aug: &AugmentedDataset,
    design: &FeatureMatrix,
    tree_opts: &TreeOptions,
    folds: usize,
    seed: u64,
) -> Result<(FittedTree, TreeHonesty)> {
    let y = aug.responses();
    let w = aug.weights();
    let sel = cv_select_alpha(design, &y, w.as_deref(), tree_opts, folds, &mut stream(seed, &[0]))?;
    let all: Vec<usize> = (0..aug.rows.len()).collect();
    let honesty = TreeHonesty {
        structure_count: all.len(),
        estimate_count: all.len(),
        structure_idx: all.clone(),
        estimate_idx: all,
    };
    Ok((sel.tree, honesty))
}

/// A single CV-pruned regression tree on the augmented data.
pub fn fit_ensemble_tree<R: RngCore>(
    aug: &AugmentedDataset,
    opts: &EnsembleTreeOptions,
    rng: &mut R,
) -> Result<EnsembleModel> {
    check_nonempty(aug)?;
    let design = aug.design();
    let (tree, sample) = full_grid_tree(aug, &design, &opts.tree, opts.folds, rng.next_u64())?;
    Ok(EnsembleModel {
        kind: EnsembleKind::Tree,
        trees: vec![tree],
        samples: vec![sample],
        n_sites: aug.n_sites,
        n_features: aug.n_features,
        fitted_on: Some(aug.fingerprint()),
    })
}

/// Forest of honest trees, each on `m = floor(subject_fraction * n)`
/// distinct subjects with one uniformly drawn site per subject, so no tree
/// sees two rows of the same subject.
pub fn fit_ensemble_forest<R: RngCore>(
    aug: &AugmentedDataset,
    opts: &EnsembleForestOptions,
    rng: &mut R,
) -> Result<EnsembleModel> {
    check_nonempty(aug)?;
    if opts.n_trees == 0 {
        return Err(Error::InvalidOptions("forest needs at least one tree".into()));
    }
    let design = aug.design();
    let p = design.n_cols();
    let base = rng.next_u64();

    let fitted = if opts.full_grid_compat {
        try_map_indexed(opts.n_trees, opts.execution, |b| {
            let seed = if b == 0 { base } else { crate::rng::derive_seed(base, &[b as u64]) };
            full_grid_tree(aug, &design, &opts.tree, opts.folds, seed)
        })?
    } else {
        let n = aug.n_subjects;
        if !(opts.subject_fraction > 0.0 && opts.subject_fraction < 1.0) {
            return Err(Error::InvalidOptions(
                "subject_fraction must lie in (0, 1) so that every tree sees fewer subjects than the estimation set".into(),
            ));
        }
        let m = (opts.subject_fraction * n as f64).floor() as usize;
        let min_leaf = opts.tree.min_leaf.max(1);
        if m < 2 * min_leaf {
            return Err(Error::SubsampleTooSmall { m, min_leaf });
        }
        let grid = aug.grid()?;
        let y = aug.responses();
        let tree_opts = TreeOptions {
            mtry: Some(opts.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)),
            ..opts.tree.clone()
        };
        try_map_indexed(opts.n_trees, opts.execution, |b| {
            let mut rng = stream(base, &[b as u64]);
            let subjects = rand::seq::index::sample(&mut rng, n, m).into_vec();
            let mut rows: Vec<usize> = subjects
                .iter()
                .map(|&i| grid[i][rng.random_range(0..aug.n_sites)])
                .collect();
            rows.shuffle(&mut rng);
            let half = rows.len() / 2;
            let mut structure = rows[..half].to_vec();
            let mut estimate = rows[half..].to_vec();
            structure.sort_unstable();
            estimate.sort_unstable();

            let xs = design.select_rows(&structure);
            let ys: Vec<f64> = structure.iter().map(|&r| y[r]).collect();
            let ws: Option<Vec<f64>> = aug
                .weights()
                .map(|w| structure.iter().map(|&r| w[r]).collect());
            let shape = fit_regression_tree(&xs, &ys, ws.as_deref(), &tree_opts, &mut rng)?;
            let tree = shape
                .reestimate(&design, &estimate, |members| weighted_mean(aug, members))
                .ok_or(Error::EmptyInput)?;
            let honesty = TreeHonesty {
                structure_count: structure.len(),
                estimate_count: estimate.len(),
                structure_idx: structure,
                estimate_idx: estimate,
            };
            Ok::<_, Error>((tree, honesty))
        })?
    };
    let (trees, samples) = fitted.into_iter().unzip();
    Ok(EnsembleModel {
        kind: EnsembleKind::Forest,
        trees,
        samples,
        n_sites: aug.n_sites,
        n_features: aug.n_features,
        fitted_on: Some(aug.fingerprint()),
    })
}

fn weighted_mean(aug: &AugmentedDataset, rows: &[usize]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let (w, s) = rows.iter().fold((0.0, 0.0), |(w, s), &r| {
        let row = &aug.rows[r];
        (w + row.row_weight, s + row.row_weight * row.tau_hat)
    });
    Some(s / w)
}

/// The model-averaged CATE at the target site, `T(x, s = 1)`.
pub fn predict_tau_star(model: &EnsembleModel, x: &[f64]) -> Result<f64> {
    model.predict_at_site(x, TARGET_SITE)
}

/// Simplex weights of each site's model at a query point.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightProfile {
    pub query_x: Vec<f64>,
    /// `weights[k - 1]` is the weight of site `k`.
    pub weights: Vec<f64>,
    pub target_site: usize,
}

impl WeightProfile {
    pub fn weight_of(&self, site: usize) -> f64 {
        self.weights[site - 1]
    }
}

/// Per augmented row, the kernel weight it receives at `(x, 1)`, averaged
/// over trees. The prediction is exactly `sum_r kernel[r] * tau_hat[r]`.
pub fn kernel_weights(model: &EnsembleModel, aug: &AugmentedDataset, x: &[f64]) -> Result<Vec<f64>> {
    match model.fitted_on {
        Some(f) if f == aug.fingerprint() => {}
        Some(_) => {
            return Err(Error::ModelDataMismatch(
                "augmented data differs from the data the model was fitted on".into(),
            ))
        }
        None => {
            return Err(Error::ModelDataMismatch(
                "model carries no row record (imported models cannot be decomposed)".into(),
            ))
        }
    }
    if aug.n_sites != model.n_sites || aug.n_features != model.n_features {
        return Err(Error::ModelDataMismatch("site or feature count differs".into()));
    }
    let q = model.query_row(x, TARGET_SITE)?;
    let design = aug.design();
    let mut kernel = vec![0.0; aug.rows.len()];
    let scale = 1.0 / model.trees.len() as f64;
    for (tree, sample) in model.trees.iter().zip(&model.samples) {
        let qpath = tree.path_of(&q);
        // depth of the common prefix between each estimation row and the query
        let shared: Vec<(usize, usize)> = sample
            .estimate_idx
            .iter()
            .map(|&r| {
                let rpath = tree.path_of(design.row(r));
                let common = qpath.iter().zip(&rpath).take_while(|(a, b)| a == b).count();
                (r, common)
            })
            .collect();
        // value source: deepest node on the query path holding estimation rows
        let depth = shared.iter().map(|&(_, c)| c).max().unwrap_or(0);
        let members: Vec<usize> = shared.iter().filter(|&&(_, c)| c == depth).map(|&(r, _)| r).collect();
        let total: f64 = members.iter().map(|&r| aug.rows[r].row_weight).sum();
        for &r in &members {
            kernel[r] += scale * aug.rows[r].row_weight / total;
        }
    }
    Ok(kernel)
}

/// Model-averaging weights `omega_k(x)` induced by the ensemble's leaves.
pub fn extract_weights(model: &EnsembleModel, aug: &AugmentedDataset, x: &[f64]) -> Result<WeightProfile> {
    let kernel = kernel_weights(model, aug, x)?;
    let mut weights = vec![0.0; aug.n_sites];
    for (row, k) in aug.rows.iter().zip(&kernel) {
        weights[row.site_idx - 1] += k;
    }
    Ok(WeightProfile {
        query_x: x.to_vec(),
        weights,
        target_site: TARGET_SITE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::SubjectRecord;

    struct Const(usize, f64);

    impl CateModel for Const {
        fn site_id(&self) -> usize {
            self.0
        }
        fn n_features(&self) -> usize {
            1
        }
        fn predict_tau(&self, _: &[f64]) -> Result<f64> {
            Ok(self.1)
        }
    }

    fn est(n: usize) -> SiteDataset {
        SiteDataset::new(
            1,
            (0..n)
                .map(|i| SubjectRecord {
                    x: vec![i as f64],
                    z: false,
                    y: 0.0,
                })
                .collect(),
        )
    }

    #[test]
    fn counts_rows_and_sites() {
        let (a, b) = (Const(1, 2.0), Const(2, 2.0));
        let aug = build_augmented(&est(3), &[&a, &b], None).unwrap();
        assert_eq!(aug.rows.len(), 6);
        assert!(aug.rows.iter().all(|r| r.tau_hat == 2.0 && (1..=2).contains(&r.site_idx)));
    }

    #[test]
    fn missing_model_named() {
        let (a, c) = (Const(1, 0.0), Const(3, 0.0));
        let b = Const(1, 0.0);
        assert!(matches!(
            build_augmented(&est(2), &[&a, &b, &c], None),
            Err(Error::MissingModel(2))
        ));
    }

    #[test]
    fn equal_sizes_give_unit_weights() {
        let models: Vec<Const> = (1..=20).map(|k| Const(k, 1.0)).collect();
        let refs: Vec<&dyn CateModel> = models.iter().map(|m| m as &dyn CateModel).collect();
        let aug = build_augmented(&est(2), &refs, Some(&[500.0; 20])).unwrap();
        assert!(aug.rows.iter().all(|r| r.row_weight == 1.0));
        let mut sizes = vec![200.0; 20];
        sizes[0] = 500.0;
        let aug = build_augmented(&est(2), &refs, Some(&sizes)).unwrap();
        let expected = 20.0 * 500.0 / (500.0 + 19.0 * 200.0);
        assert!((aug.rows[0].row_weight - expected).abs() < 1e-12);
    }

    #[test]
    fn forest_rejects_tiny_subsample() {
        let models: Vec<Const> = (1..=2).map(|k| Const(k, k as f64)).collect();
        let refs: Vec<&dyn CateModel> = models.iter().map(|m| m as &dyn CateModel).collect();
        let aug = build_augmented(&est(12), &refs, None).unwrap();
        let opts = EnsembleForestOptions {
            n_trees: 3,
            ..EnsembleForestOptions::default()
        };
        assert!(matches!(
            fit_ensemble_forest(&aug, &opts, &mut stream(0, &[])),
            Err(Error::SubsampleTooSmall { m: 6, min_leaf: 5 })
        ));
    }
}
