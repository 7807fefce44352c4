use rand::Rng;

use super::{ColumnKind, FeatureMatrix, FittedTree, Split, SplitRule, TreeNode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TreeOptions {
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    /// Columns drawn uniformly per split; `None` scans every column.
    pub mtry: Option<usize>,
    /// A split must reduce the weighted SSE by at least this fraction of the
    /// root SSE. Zero accepts any strictly positive reduction.
    pub min_gain_fraction: f64,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self {
            min_leaf: 5,
            max_depth: None,
            mtry: None,
            min_gain_fraction: 0.0,
        }
    }
}

struct Candidate {
    gain: f64,
    feature: usize,
    rule: SplitRule,
}

struct Grower<'a, R> {
    x: &'a FeatureMatrix,
    y: &'a [f64],
    w: Option<&'a [f64]>,
    opts: &'a TreeOptions,
    rng: &'a mut R,
    nodes: Vec<TreeNode>,
    min_gain: f64,
    // scratch
    order: Vec<(f64, f64, f64)>,
}

#[inline]
fn weight(w: Option<&[f64]>, i: usize) -> f64 {
    w.map_or(1.0, |w| w[i])
}

/// Gain of splitting a group into (left, right), written as the between-group
/// sum of squares so it never cancels catastrophically.
#[inline]
fn split_gain(wl: f64, sl: f64, wr: f64, sr: f64) -> f64 {
    let d = sl / wl - sr / wr;
    wl * wr / (wl + wr) * d * d
}

impl<'a, R: Rng> Grower<'a, R> {
    fn stats(&self, idx: &[usize]) -> (f64, f64, f64) {
        let mut wsum = 0.0;
        let mut s = 0.0;
        for &i in idx {
            let wi = weight(self.w, i);
            wsum += wi;
            s += wi * self.y[i];
        }
        let mean = s / wsum;
        let sse = idx
            .iter()
            .map(|&i| {
                let d = self.y[i] - mean;
                weight(self.w, i) * d * d
            })
            .sum();
        (wsum, mean, sse)
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let (wsum, mean, sse) = self.stats(idx);
        let id = self.nodes.len();
        self.nodes.push(TreeNode::leaf(id, mean, idx.len(), wsum, sse));
        if id == 0 {
            // rounding noise in a constant response must not count as signal
            let scale = sse + wsum * mean * mean;
            self.min_gain = (self.opts.min_gain_fraction * sse).max(scale * 1e-12);
        }

        let can_split = idx.len() >= 2 * self.opts.min_leaf.max(1)
            && self.opts.max_depth.is_none_or(|d| depth < d)
            && sse > self.min_gain;
        if !can_split {
            return id;
        }
        let Some(best) = self.best_split(idx, sse) else {
            return id;
        };
        let split = Split {
            feature: best.feature,
            rule: best.rule,
        };
        // stable partition keeps index order inside each child
        let (mut left, mut right): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| split.goes_left(self.x.row(i)));
        let l = self.grow(&mut left, depth + 1);
        let r = self.grow(&mut right, depth + 1);
        let node = &mut self.nodes[id];
        node.split = Some(split);
        node.left = Some(l);
        node.right = Some(r);
        id
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let p = self.x.n_cols();
        match self.opts.mtry {
            Some(m) if m < p => {
                let mut cols = rand::seq::index::sample(self.rng, p, m.max(1)).into_vec();
                cols.sort_unstable();
                cols
            }
            _ => (0..p).collect(),
        }
    }

    fn best_split(&mut self, idx: &[usize], node_sse: f64) -> Option<Candidate> {
        let tol = 1e-12 * node_sse.max(f64::MIN_POSITIVE);
        let mut best: Option<Candidate> = None;
        for j in self.candidate_features() {
            let cand = match self.x.kinds()[j] {
                ColumnKind::Numeric => self.best_numeric(idx, j),
                ColumnKind::Categorical { levels } => self.best_categorical(idx, j, levels),
            };
            if let Some(c) = cand {
                if best.as_ref().is_none_or(|b| c.gain > b.gain + tol) {
                    best = Some(c);
                }
            }
        }
        best.filter(|b| b.gain > self.min_gain)
    }

    fn best_numeric(&mut self, idx: &[usize], j: usize) -> Option<Candidate> {
        let min_leaf = self.opts.min_leaf.max(1);
        let n = idx.len();
        self.order.clear();
        for &i in idx {
            let wi = weight(self.w, i);
            self.order.push((self.x.get(i, j), wi, wi * self.y[i]));
        }
        self.order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (wt, st) = self
            .order
            .iter()
            .fold((0.0, 0.0), |(w, s), o| (w + o.1, s + o.2));
        let mut wl = 0.0;
        let mut sl = 0.0;
        let mut best: Option<(f64, usize)> = None;
        for k in 0..n - 1 {
            wl += self.order[k].1;
            sl += self.order[k].2;
            let nl = k + 1;
            if nl < min_leaf {
                continue;
            }
            if n - nl < min_leaf {
                break;
            }
            if self.order[k].0 == self.order[k + 1].0 {
                continue;
            }
            let gain = split_gain(wl, sl, wt - wl, st - sl);
            let tol = 1e-12 * gain.abs();
            if best.is_none_or(|(g, _)| gain > g + tol) {
                best = Some((gain, k));
            }
        }
        best.map(|(gain, k)| {
            let a = self.order[k].0;
            let b = self.order[k + 1].0;
            let mut t = a + (b - a) / 2.0;
            if t >= b {
                t = a;
            }
            Candidate {
                gain,
                feature: j,
                rule: SplitRule::Threshold(t),
            }
        })
    }

    fn best_categorical(&mut self, idx: &[usize], j: usize, levels: u32) -> Option<Candidate> {
        let min_leaf = self.opts.min_leaf.max(1);
        let mut count = vec![0usize; levels as usize];
        let mut wsum = vec![0.0; levels as usize];
        let mut ssum = vec![0.0; levels as usize];
        for &i in idx {
            let l = self.x.get(i, j) as usize;
            let wi = weight(self.w, i);
            count[l] += 1;
            wsum[l] += wi;
            ssum[l] += wi * self.y[i];
        }
        let mut present: Vec<usize> = (0..levels as usize).filter(|&l| count[l] > 0).collect();
        if present.len() < 2 {
            return None;
        }
        // Ordering levels by mean response makes the prefix scan exact for
        // squared error.
        present.sort_by(|&a, &b| {
            (ssum[a] / wsum[a])
                .total_cmp(&(ssum[b] / wsum[b]))
                .then(a.cmp(&b))
        });
        let wt: f64 = present.iter().map(|&l| wsum[l]).sum();
        let st: f64 = present.iter().map(|&l| ssum[l]).sum();
        let n = idx.len();
        let (mut nl, mut wl, mut sl) = (0usize, 0.0, 0.0);
        let mut best: Option<(f64, usize)> = None;
        for (k, &l) in present.iter().enumerate().take(present.len() - 1) {
            nl += count[l];
            wl += wsum[l];
            sl += ssum[l];
            if nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let gain = split_gain(wl, sl, wt - wl, st - sl);
            let tol = 1e-12 * gain.abs();
            if best.is_none_or(|(g, _)| gain > g + tol) {
                best = Some((gain, k));
            }
        }
        best.map(|(gain, k)| {
            let mut set: Vec<u32> = present[..=k].iter().map(|&l| l as u32).collect();
            set.sort_unstable();
            Candidate {
                gain,
                feature: j,
                rule: SplitRule::Levels(set),
            }
        })
    }
}

/// Greedy CART fit minimising (optionally weighted) within-node squared error.
///
/// Numeric splits sit at midpoints between adjacent distinct values and send
/// `value <= threshold` left. Categorical splits order the levels present in
/// the node by mean response and scan the prefixes. Among equally good
/// candidates the lowest column and then the smallest threshold wins.
pub fn fit_regression_tree<R: Rng>(
    x: &FeatureMatrix,
    y: &[f64],
    weights: Option<&[f64]>,
    opts: &TreeOptions,
    rng: &mut R,
) -> Result<FittedTree> {
    if x.n_rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != x.n_rows() {
        return Err(Error::LengthMismatch {
            expected: x.n_rows(),
            got: y.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != x.n_rows() {
            return Err(Error::LengthMismatch {
                expected: x.n_rows(),
                got: w.len(),
            });
        }
        if w.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::InvalidOptions("row weights must be positive and finite".into()));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidOptions("response contains non-finite values".into()));
    }
    if !(opts.min_gain_fraction >= 0.0 && opts.min_gain_fraction.is_finite()) {
        return Err(Error::InvalidOptions("min_gain_fraction must be finite and >= 0".into()));
    }
    let mut grower = Grower {
        x,
        y,
        w: weights,
        opts,
        rng,
        nodes: Vec::new(),
        min_gain: 0.0,
        order: Vec::with_capacity(x.n_rows()),
    };
    let mut idx: Vec<usize> = (0..x.n_rows()).collect();
    grower.grow(&mut idx, 0);
    Ok(FittedTree::from_parts_unchecked(
        grower.nodes,
        x.kinds().to_vec(),
        0.0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn fit(x: &FeatureMatrix, y: &[f64], min_leaf: usize) -> FittedTree {
        let opts = TreeOptions {
            min_leaf,
            ..TreeOptions::default()
        };
        fit_regression_tree(x, y, None, &opts, &mut stream(0, &[])).unwrap()
    }

    #[test]
    fn constant_response_is_single_leaf() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * 7 % 3) as f64, 1.0]).collect();
        let x = FeatureMatrix::numeric(&rows).unwrap();
        let t = fit(&x, &[4.2; 10], 1);
        assert_eq!(t.nodes().len(), 1);
        assert!((t.root().value - 4.2).abs() < 1e-12);
    }

    #[test]
    fn step_split_at_midpoint() {
        let x = FeatureMatrix::numeric(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let t = fit(&x, &[0.0, 0.0, 10.0, 10.0], 1);
        assert_eq!(
            t.root().split,
            Some(Split {
                feature: 0,
                rule: SplitRule::Threshold(1.5)
            })
        );
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.predict(&[2.7]).unwrap(), 10.0);
        assert_eq!(t.predict(&[1.5]).unwrap(), 0.0);
    }

    #[test]
    fn categorical_isolates_high_level() {
        let means = [1.0, 9.0, 1.2];
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..30 {
            let l = i % 3;
            rows.push(vec![l as f64]);
            y.push(means[l] + if i % 2 == 0 { 0.05 } else { -0.05 });
        }
        let x = FeatureMatrix::from_rows(&rows, vec![ColumnKind::Categorical { levels: 3 }]).unwrap();
        let t = fit(&x, &y, 1);
        let rule = &t.root().split.as_ref().unwrap().rule;
        assert_eq!(rule, &SplitRule::Levels(vec![0, 2]));
    }

    #[test]
    fn min_leaf_blocks_small_children() {
        let x = FeatureMatrix::numeric(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let t = fit(&x, &[0.0, 10.0, 10.0, 10.0], 2);
        assert_eq!(
            t.root().split.as_ref().map(|s| s.rule.clone()),
            Some(SplitRule::Threshold(1.5))
        );
        assert_eq!(fit(&x, &[0.0, 10.0, 10.0, 10.0], 3).nodes().len(), 1);
    }

    #[test]
    fn weights_shift_leaf_means() {
        let x = FeatureMatrix::numeric(&[[0.0], [0.0], [1.0]]).unwrap();
        let w = [1.0, 3.0, 1.0];
        let opts = TreeOptions {
            min_leaf: 1,
            ..TreeOptions::default()
        };
        let t = fit_regression_tree(&x, &[0.0, 4.0, 5.0], Some(&w), &opts, &mut stream(0, &[])).unwrap();
        assert_eq!(t.predict(&[0.0]).unwrap(), 3.0);
        assert_eq!(t.nodes()[0].value, 17.0 / 5.0);
    }

    #[test]
    fn max_depth_and_gain_floor_stop_growth() {
        let rows: Vec<[f64; 1]> = (0..16).map(|i| [i as f64]).collect();
        let y: Vec<f64> = (0..16).map(|i| (i * i) as f64).collect();
        let x = FeatureMatrix::numeric(&rows).unwrap();
        let mut opts = TreeOptions {
            min_leaf: 1,
            max_depth: Some(1),
            ..TreeOptions::default()
        };
        let t = fit_regression_tree(&x, &y, None, &opts, &mut stream(0, &[])).unwrap();
        assert_eq!(t.depth(), 1);
        opts.max_depth = None;
        opts.min_gain_fraction = 0.5;
        let t = fit_regression_tree(&x, &y, None, &opts, &mut stream(0, &[])).unwrap();
        assert!(t.n_leaves() <= 2);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let x = FeatureMatrix::new(0, 1, vec![], vec![ColumnKind::Numeric]).unwrap();
        let opts = TreeOptions::default();
        assert!(matches!(
            fit_regression_tree(&x, &[], None, &opts, &mut stream(0, &[])),
            Err(Error::EmptyInput)
        ));
        let x = FeatureMatrix::numeric(&[[0.0], [1.0]]).unwrap();
        assert!(matches!(
            fit_regression_tree(&x, &[1.0], None, &opts, &mut stream(0, &[])),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
