use rand::seq::SliceRandom;
use rand::RngCore;

use super::{LocalCateModel, LocalModelKind, Propensity, SiteDataset, TreeHonesty};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::rng::{stream, Stream};
use crate::tree::{cv_select_alpha, fit_regression_tree, FeatureMatrix, FittedTree, TreeOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pruning {
    CrossValidated { folds: usize },
    Unpruned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalTreeOptions {
    pub tree: TreeOptions,
    pub pruning: Pruning,
}

impl Default for CausalTreeOptions {
    fn default() -> Self {
        Self {
            tree: TreeOptions::default(),
            pruning: Pruning::CrossValidated { folds: 5 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalForestOptions {
    pub n_trees: usize,
    pub subsample_fraction: f64,
    /// `None` uses `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    pub tree: TreeOptions,
    pub pruning: Pruning,
    pub execution: Execution,
}

impl Default for CausalForestOptions {
    fn default() -> Self {
        Self {
            n_trees: 200,
            subsample_fraction: 0.5,
            mtry: None,
            // honest leaves end up with about this many estimation rows, and
            // IPW contrasts over fewer are too noisy to average away
            tree: TreeOptions {
                min_leaf: 40,
                ..TreeOptions::default()
            },
            pruning: Pruning::Unpruned,
            execution: Execution::Parallel,
        }
    }
}

const RANDOMISED: Propensity = Propensity::Constant(0.5);

/// Honest causal tree over `idx`: half the records place the splits on the
/// IPW-transformed outcome, the other half fill the leaves with IPW
/// differences of arm means.
fn honest_tree(
    data: &SiteDataset,
    x: &FeatureMatrix,
    idx: &[usize],
    prop: &Propensity,
    tree_opts: &TreeOptions,
    pruning: Pruning,
    rng: &mut Stream,
) -> Result<(FittedTree, TreeHonesty)> {
    if idx.len() < 2 {
        return Err(Error::PositivityViolation(format!(
            "site {} has {} records, too few to split honestly",
            data.site_id,
            idx.len()
        )));
    }
    // split within each arm so both halves see both arms whenever possible
    let mut order = idx.to_vec();
    order.shuffle(rng);
    let (treated, control): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| data.records[i].z);
    let (t_half, c_half) = (treated.len() / 2, control.len() / 2);
    let mut structure: Vec<usize> = treated[..t_half].iter().chain(&control[..c_half]).copied().collect();
    let mut estimate: Vec<usize> = treated[t_half..].iter().chain(&control[c_half..]).copied().collect();
    structure.sort_unstable();
    estimate.sort_unstable();

    let (t, c) = (treated.len() - t_half, control.len() - c_half);
    if t == 0 || c == 0 {
        return Err(Error::PositivityViolation(format!(
            "site {}: estimation half has {t} treated and {c} control",
            data.site_id
        )));
    }

    let xs = x.select_rows(&structure);
    let ystar: Vec<f64> = structure
        .iter()
        .map(|&i| {
            let r = &data.records[i];
            let e = prop.score(&r.x);
            if r.z {
                r.y / e
            } else {
                -r.y / (1.0 - e)
            }
        })
        .collect();
    let shape = match pruning {
        Pruning::CrossValidated { folds } => cv_select_alpha(&xs, &ystar, None, tree_opts, folds, rng)?.tree,
        Pruning::Unpruned => fit_regression_tree(&xs, &ystar, None, tree_opts, rng)?,
    };

    let constant = prop.is_constant();
    let leaf_effect = |rows: &[usize]| -> Option<f64> {
        let (mut wt, mut st, mut wc, mut sc) = (0.0, 0.0, 0.0, 0.0);
        for &i in rows {
            let r = &data.records[i];
            let e = prop.score(&r.x);
            let w = match (constant, r.z) {
                (true, _) => 1.0,
                (false, true) => 1.0 / e,
                (false, false) => 1.0 / (1.0 - e),
            };
            if r.z {
                wt += w;
                st += w * r.y;
            } else {
                wc += w;
                sc += w * r.y;
            }
        }
        (wt > 0.0 && wc > 0.0).then(|| st / wt - sc / wc)
    };
    let tree = shape.reestimate(x, &estimate, leaf_effect).ok_or_else(|| {
        Error::PositivityViolation(format!("site {}: empty arm at the root", data.site_id))
    })?;
    let honesty = TreeHonesty {
        structure_count: structure.len(),
        estimate_count: estimate.len(),
        structure_idx: structure,
        estimate_idx: estimate,
    };
    Ok((tree, honesty))
}

/// Honest causal tree on a whole site dataset. `prop = None` means a
/// randomised design with assignment probability 0.5.
pub fn fit_causal_tree<R: RngCore>(
    data: &SiteDataset,
    prop: Option<&Propensity>,
    opts: &CausalTreeOptions,
    rng: &mut R,
) -> Result<LocalCateModel> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let x = data.features()?;
    let prop = prop.unwrap_or(&RANDOMISED);
    let base = rng.next_u64();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (tree, honesty) = honest_tree(data, &x, &idx, prop, &opts.tree, opts.pruning, &mut stream(base, &[0]))?;
    Ok(LocalCateModel {
        site_id: data.site_id,
        kind: LocalModelKind::CausalTree,
        trees: vec![tree],
        honesty: vec![honesty],
    })
}

/// Average of honest causal trees, each grown on a subsample drawn without
/// replacement. Tree `b` draws from its own stream, so the forest is the
/// same whatever the execution mode.
pub fn fit_causal_forest<R: RngCore>(
    data: &SiteDataset,
    prop: Option<&Propensity>,
    opts: &CausalForestOptions,
    rng: &mut R,
) -> Result<LocalCateModel> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    if opts.n_trees == 0 {
        return Err(Error::InvalidOptions("n_trees must be at least 1".into()));
    }
    if !(opts.subsample_fraction > 0.0 && opts.subsample_fraction <= 1.0) {
        return Err(Error::InvalidOptions("subsample_fraction must lie in (0, 1]".into()));
    }
    let x = data.features()?;
    let prop = prop.unwrap_or(&RANDOMISED);
    let n = data.len();
    let p = x.n_cols();
    let m = ((opts.subsample_fraction * n as f64).round() as usize).clamp(2.min(n), n);
    let tree_opts = TreeOptions {
        mtry: Some(opts.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)),
        ..opts.tree.clone()
    };
    let base = rng.next_u64();
    let fitted = try_map_indexed(opts.n_trees, opts.execution, |b| {
        let mut rng = stream(base, &[b as u64]);
        let idx: Vec<usize> = if m == n {
            (0..n).collect()
        } else {
            let mut s = rand::seq::index::sample(&mut rng, n, m).into_vec();
            s.sort_unstable();
            s
        };
        honest_tree(data, &x, &idx, prop, &tree_opts, opts.pruning, &mut rng)
    })?;
    let (trees, honesty) = fitted.into_iter().unzip();
    Ok(LocalCateModel {
        site_id: data.site_id,
        kind: LocalModelKind::CausalForest,
        trees,
        honesty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::SubjectRecord;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn constant_effect(n: usize, tau: f64, seed: u64) -> SiteDataset {
        let mut rng = stream(seed, &[]);
        let records = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                let z = rng.random::<bool>();
                let eps: f64 = rng.sample(StandardNormal);
                let y = tau * (if z { 0.5 } else { -0.5 }) + eps;
                SubjectRecord { x, z, y }
            })
            .collect();
        SiteDataset::new(1, records)
    }

    #[test]
    fn constant_effect_recovered() {
        let d = constant_effect(2000, 3.0, 1);
        let m = fit_causal_tree(&d, None, &CausalTreeOptions::default(), &mut stream(2, &[])).unwrap();
        for row in [[0.0, 0.0, 0.0], [2.0, -1.0, 0.5], [-2.0, 1.0, -0.5]] {
            let v = m.predict_tau(&row).unwrap();
            assert!((v - 3.0).abs() < 0.2, "{v}");
        }
    }

    #[test]
    fn constant_outcome_gives_zero_effect() {
        let mut d = constant_effect(200, 0.0, 3);
        for r in &mut d.records {
            r.y = 7.0;
        }
        let m = fit_causal_tree(&d, None, &CausalTreeOptions::default(), &mut stream(0, &[])).unwrap();
        assert_eq!(m.trees[0].nodes().len(), 1);
        assert_eq!(m.predict_tau(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn half_propensity_leaf_is_difference_of_means() {
        let d = constant_effect(400, 1.0, 9);
        let opts = CausalTreeOptions {
            pruning: Pruning::Unpruned,
            tree: TreeOptions {
                min_leaf: 40,
                ..TreeOptions::default()
            },
        };
        let m = fit_causal_tree(&d, Some(&Propensity::Constant(0.5)), &opts, &mut stream(4, &[])).unwrap();
        let tree = &m.trees[0];
        let est = &m.honesty[0].estimate_idx;
        let x = d.features().unwrap();
        let members = tree.node_members(&x, est);
        for node in tree.nodes().iter().filter(|n| n.is_leaf()) {
            let rows = &members[node.node_id];
            let (t, c): (Vec<f64>, Vec<f64>) = (
                rows.iter().filter(|&&i| d.records[i].z).map(|&i| d.records[i].y).collect(),
                rows.iter().filter(|&&i| !d.records[i].z).map(|&i| d.records[i].y).collect(),
            );
            if t.is_empty() || c.is_empty() {
                continue;
            }
            let diff = t.iter().sum::<f64>() / t.len() as f64 - c.iter().sum::<f64>() / c.len() as f64;
            assert_eq!(node.value, diff);
        }
    }

    #[test]
    fn single_arm_is_positivity_error() {
        let mut d = constant_effect(50, 1.0, 5);
        for r in &mut d.records {
            r.z = true;
        }
        assert!(matches!(
            fit_causal_tree(&d, None, &CausalTreeOptions::default(), &mut stream(0, &[])),
            Err(Error::PositivityViolation(_))
        ));
    }

    #[test]
    fn tiny_sample_still_fits() {
        let d = constant_effect(10, 1.0, 6);
        let d = SiteDataset::new(1, {
            let mut r = d.records;
            for (i, rec) in r.iter_mut().enumerate() {
                rec.z = i % 2 == 0;
            }
            r
        });
        assert!(fit_causal_tree(&d, None, &CausalTreeOptions::default(), &mut stream(0, &[])).is_ok());
    }
}
