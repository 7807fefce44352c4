use rand::seq::SliceRandom;
use rand::Rng;

use super::{fit_regression_tree, FeatureMatrix, FittedTree, TreeNode, TreeOptions};
use crate::error::{Error, Result};

/// Weakest-link cost-complexity sequence of a fitted tree.
///
/// Rather than materialising every subtree, the path records the penalty at
/// which each internal node collapses into a leaf; subtrees are cut out of
/// the base tree on demand.
#[derive(Clone, Debug)]
pub struct CcpPath {
    base: FittedTree,
    alphas: Vec<f64>,
    /// Per node: the smallest alpha at which it is a leaf of the pruned tree
    /// (infinite for leaves of the base tree).
    collapse_at: Vec<f64>,
    leaves: Vec<usize>,
    cv_errors: Vec<f64>,
}

impl CcpPath {
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn cv_errors(&self) -> &[f64] {
        &self.cv_errors
    }

    /// Leaf counts of the subtrees, aligned with [`alphas`](Self::alphas).
    pub fn leaf_counts(&self) -> &[usize] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn base(&self) -> &FittedTree {
        &self.base
    }

    /// The subtree for the `j`-th alpha.
    pub fn subtree(&self, j: usize) -> FittedTree {
        self.prune_at(self.alphas[j])
    }

    /// The cost-complexity optimal subtree for an arbitrary penalty.
    pub fn prune_at(&self, alpha: f64) -> FittedTree {
        let src = self.base.nodes();
        let mut nodes: Vec<TreeNode> = Vec::with_capacity(src.len());
        // preorder copy that stops descending at collapsed nodes
        let mut stack = vec![(0usize, None::<(usize, bool)>)];
        while let Some((old, parent)) = stack.pop() {
            let new_id = nodes.len();
            let mut node = src[old].clone();
            node.node_id = new_id;
            if let Some((p, is_left)) = parent {
                if is_left {
                    nodes[p].left = Some(new_id);
                } else {
                    nodes[p].right = Some(new_id);
                }
            }
            let collapse = self.collapse_at[old] <= alpha;
            let children = (node.left, node.right);
            if collapse || node.is_leaf() {
                node.split = None;
                node.left = None;
                node.right = None;
                nodes.push(node);
            } else {
                nodes.push(node);
                if let (Some(l), Some(r)) = children {
                    stack.push((r, Some((new_id, false))));
                    stack.push((l, Some((new_id, true))));
                }
            }
        }
        FittedTree::from_parts_unchecked(nodes, self.base.column_kinds().to_vec(), alpha)
    }

    /// Predictions of row `row` under each penalty in `alphas`, without
    /// building the subtrees.
    fn predict_along(&self, row: &[f64], alphas: &[f64], out: &mut [f64]) {
        let path = self.base.path_of(row);
        let nodes = self.base.nodes();
        for (o, &a) in out.iter_mut().zip(alphas) {
            // collapse_at is non-increasing along a root-to-leaf path
            let stop = path
                .iter()
                .find(|&&id| self.collapse_at[id] <= a)
                .copied()
                .unwrap_or(*path.last().unwrap_or(&0));
            *o = nodes[stop].value;
        }
    }
}

/// Weakest-link pruning: repeatedly collapse the internal node(s) with the
/// smallest `(R(t) - R(T_t)) / (|T_t| - 1)` until only the root remains.
pub fn prune_ccp(tree: &FittedTree) -> CcpPath {
    let nodes = tree.nodes();
    let n = nodes.len();
    let mut collapse_at = vec![f64::INFINITY; n];
    let mut alive = vec![true; n];
    let mut alphas = vec![0.0];
    let mut leaves = vec![tree.n_leaves()];
    let mut sub_sse = vec![0.0; n];
    let mut sub_leaves = vec![0usize; n];

    loop {
        // bottom-up subtree statistics of the current pruned tree
        for i in (0..n).rev() {
            let node = &nodes[i];
            let internal = !node.is_leaf() && collapse_at[i].is_infinite();
            if internal {
                let (l, r) = (node.left.unwrap_or(i), node.right.unwrap_or(i));
                sub_sse[i] = sub_sse[l] + sub_sse[r];
                sub_leaves[i] = sub_leaves[l] + sub_leaves[r];
            } else {
                sub_sse[i] = node.sse;
                sub_leaves[i] = 1;
            }
        }
        if sub_leaves[0] == 1 {
            break;
        }
        let mut gmin = f64::INFINITY;
        let mut g = vec![f64::INFINITY; n];
        for i in 0..n {
            if alive[i] && !nodes[i].is_leaf() && collapse_at[i].is_infinite() {
                g[i] = ((nodes[i].sse - sub_sse[i]) / (sub_leaves[i] - 1) as f64).max(0.0);
                gmin = gmin.min(g[i]);
            }
        }
        let tol = 1e-10 * gmin.abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            if g[i] <= gmin + tol {
                collapse_at[i] = gmin;
            }
        }
        // descendants of collapsed nodes disappear at the same penalty
        for i in 0..n {
            if collapse_at[i].is_finite() || !alive[i] {
                if let (Some(l), Some(r)) = (nodes[i].left, nodes[i].right) {
                    for c in [l, r] {
                        alive[c] = false;
                        if collapse_at[c] > collapse_at[i] {
                            collapse_at[c] = collapse_at[i];
                        }
                    }
                }
            }
        }
        // leaf count of the new pruned tree
        let mut count = 0;
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            match (nodes[i].left, nodes[i].right) {
                (Some(l), Some(r)) if collapse_at[i].is_infinite() => {
                    stack.push(l);
                    stack.push(r);
                }
                _ => count += 1,
            }
        }
        let last = *alphas.last().unwrap_or(&0.0);
        if gmin <= last {
            *leaves.last_mut().unwrap() = count;
        } else {
            alphas.push(gmin);
            leaves.push(count);
        }
    }

    CcpPath {
        base: tree.clone(),
        cv_errors: vec![f64::NAN; alphas.len()],
        alphas,
        collapse_at,
        leaves,
    }
}

#[derive(Clone, Debug)]
pub struct CvSelection {
    pub alpha: f64,
    pub tree: FittedTree,
    pub path: CcpPath,
}

/// K-fold cross-validation over the full-data pruning path.
///
/// Each fold tree is evaluated at the geometric midpoint of consecutive path
/// alphas (the usual rpart convention). The alpha with the smallest mean CV
/// error is kept; no one-standard-error rule. Exact ties favour the simpler
/// tree.
pub fn cv_select_alpha<R: Rng>(
    x: &FeatureMatrix,
    y: &[f64],
    weights: Option<&[f64]>,
    opts: &TreeOptions,
    folds: usize,
    rng: &mut R,
) -> Result<CvSelection> {
    let n = x.n_rows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if folds < 2 {
        return Err(Error::InvalidOptions(format!("need at least 2 folds, got {folds}")));
    }
    let full = fit_regression_tree(x, y, weights, opts, rng)?;
    let mut path = prune_ccp(&full);
    if path.len() == 1 {
        return Ok(CvSelection {
            alpha: 0.0,
            tree: full,
            path,
        });
    }
    // fewer rows than folds degrades to leave-one-out
    let folds = folds.min(n);

    let k = path.len();
    let probes: Vec<f64> = (0..k)
        .map(|j| {
            if j + 1 < k {
                (path.alphas[j] * path.alphas[j + 1]).sqrt()
            } else {
                // the root-only candidate is scored as root-only in every fold
                f64::INFINITY
            }
        })
        .collect();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut fold_of = vec![0usize; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % folds;
    }

    let mut err = vec![0.0; k];
    let mut total_w = 0.0;
    let mut preds = vec![0.0; k];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let wt: Option<Vec<f64>> = weights.map(|w| train.iter().map(|&i| w[i]).collect());
        let tree = fit_regression_tree(&xt, &yt, wt.as_deref(), opts, rng)?;
        let fold_path = prune_ccp(&tree);
        for &i in &test {
            let wi = weights.map_or(1.0, |w| w[i]);
            total_w += wi;
            fold_path.predict_along(x.row(i), &probes, &mut preds);
            for (e, p) in err.iter_mut().zip(&preds) {
                let d = y[i] - p;
                *e += wi * d * d;
            }
        }
    }
    for e in err.iter_mut() {
        *e /= total_w;
    }
    let mut best = 0;
    for j in 1..k {
        if err[j] <= err[best] {
            best = j;
        }
    }
    path.cv_errors = err;
    let tree = path.subtree(best);
    Ok(CvSelection {
        alpha: path.alphas[best],
        tree,
        path,
    })
}
