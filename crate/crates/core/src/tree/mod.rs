//! Piecewise-constant regression trees: fitting, prediction, cost-complexity
//! pruning and cross-validated selection of the pruning penalty.
//!
//! Trees are stored as a flat node array in preorder, so `node_id` is the
//! position in [`FittedTree::nodes`] and every child id is larger than its
//! parent's.

mod grow;
mod prune;

pub use grow::{fit_regression_tree, TreeOptions};
pub use prune::{cv_select_alpha, prune_ccp, CcpPath, CvSelection};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    /// Values are integer level codes in `[0, levels)`.
    Categorical { levels: u32 },
}

/// Dense row-major matrix of complete, finite covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    kinds: Vec<ColumnKind>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, kinds: Vec<ColumnKind>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if kinds.len() != cols {
            return Err(Error::InvalidMatrix(format!(
                "{} column kinds for {cols} columns",
                kinds.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidMatrix(format!(
                    "non-finite value at row {}, column {}",
                    i / cols,
                    i % cols
                )));
            }
            if let ColumnKind::Categorical { levels } = kinds[i % cols] {
                if v.fract() != 0.0 || *v < 0.0 || *v >= f64::from(levels) {
                    return Err(Error::InvalidMatrix(format!(
                        "value {v} at row {}, column {} is not a level in [0, {levels})",
                        i / cols,
                        i % cols
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            values,
            kinds,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], kinds: Vec<ColumnKind>) -> Result<Self> {
        let cols = kinds.len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidMatrix(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values, kinds)
    }

    /// All-numeric matrix from rows.
    pub fn numeric<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        Self::from_rows(rows, vec![ColumnKind::Numeric; cols])
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            values,
            kinds: self.kinds.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitRule {
    /// Rows with `value <= threshold` go left.
    Threshold(f64),
    /// Rows whose level is in the (sorted) set go left; every other level,
    /// including levels never seen in training, goes right.
    Levels(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub rule: SplitRule,
}

impl Split {
    #[inline]
    pub fn goes_left(&self, row: &[f64]) -> bool {
        let v = row[self.feature];
        match &self.rule {
            SplitRule::Threshold(t) => v <= *t,
            SplitRule::Levels(set) => set.binary_search(&(v as u32)).is_ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub node_id: usize,
    pub split: Option<Split>,
    pub left: Option<usize>,
    pub right: Option<usize>,
    /// Mean response of the rows behind this node (the prediction for leaves).
    pub value: f64,
    pub n_node: usize,
    /// Sum of row weights at this node.
    pub weight: f64,
    /// Within-node weighted sum of squared errors.
    pub sse: f64,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }

    pub(crate) fn leaf(node_id: usize, value: f64, n_node: usize, weight: f64, sse: f64) -> Self {
        Self {
            node_id,
            split: None,
            left: None,
            right: None,
            value,
            n_node,
            weight,
            sse,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedTree {
    nodes: Vec<TreeNode>,
    n_features: usize,
    column_kinds: Vec<ColumnKind>,
    complexity_alpha: f64,
}

impl FittedTree {
    /// Assemble a tree from preorder nodes, validating the array encoding.
    pub fn from_nodes(
        nodes: Vec<TreeNode>,
        column_kinds: Vec<ColumnKind>,
        complexity_alpha: f64,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::SchemaError("tree has no nodes".into()));
        }
        let n_features = column_kinds.len();
        let mut parents = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            if node.node_id != i {
                return Err(Error::SchemaError(format!(
                    "node at position {i} has node_id {}",
                    node.node_id
                )));
            }
            match (&node.split, node.left, node.right) {
                (None, None, None) => {}
                (Some(split), Some(l), Some(r)) => {
                    if split.feature >= n_features {
                        return Err(Error::SchemaError(format!(
                            "node {i} splits on feature {} of {n_features}",
                            split.feature
                        )));
                    }
                    let kind_ok = matches!(
                        (&split.rule, column_kinds[split.feature]),
                        (SplitRule::Threshold(_), ColumnKind::Numeric)
                            | (SplitRule::Levels(_), ColumnKind::Categorical { .. })
                    );
                    if !kind_ok {
                        return Err(Error::SchemaError(format!(
                            "node {i} rule does not match the kind of feature {}",
                            split.feature
                        )));
                    }
                    for c in [l, r] {
                        if c <= i || c >= nodes.len() {
                            return Err(Error::SchemaError(format!(
                                "node {i} has out-of-order child {c}"
                            )));
                        }
                        parents[c] += 1;
                    }
                }
                (Some(_), _, _) => {
                    return Err(Error::SchemaError(format!("internal node {i} is missing a child")))
                }
                (None, _, _) => {
                    return Err(Error::SchemaError(format!("leaf node {i} has children")))
                }
            }
            if node.is_leaf() && !node.value.is_finite() {
                return Err(Error::SchemaError(format!("leaf node {i} has non-finite value")));
            }
        }
        if let Some(i) = (1..nodes.len()).find(|&i| parents[i] != 1) {
            return Err(Error::SchemaError(format!(
                "node {i} is referenced by {} parents",
                parents[i]
            )));
        }
        Ok(Self {
            nodes,
            n_features,
            column_kinds,
            complexity_alpha,
        })
    }

    pub(crate) fn from_parts_unchecked(
        nodes: Vec<TreeNode>,
        column_kinds: Vec<ColumnKind>,
        complexity_alpha: f64,
    ) -> Self {
        Self {
            n_features: column_kinds.len(),
            nodes,
            column_kinds,
            complexity_alpha,
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn column_kinds(&self) -> &[ColumnKind] {
        &self.column_kinds
    }

    pub fn complexity_alpha(&self) -> f64 {
        self.complexity_alpha
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for node in &self.nodes {
            if let (Some(l), Some(r)) = (node.left, node.right) {
                depth[l] = depth[node.node_id] + 1;
                depth[r] = depth[node.node_id] + 1;
                max = max.max(depth[l]);
            }
        }
        max
    }

    /// Leaf reached by `row`; no width check.
    #[inline]
    pub(crate) fn leaf_of(&self, row: &[f64]) -> usize {
        let mut id = 0;
        loop {
            let node = &self.nodes[id];
            match &node.split {
                None => return id,
                Some(split) => {
                    id = if split.goes_left(row) {
                        node.left.unwrap_or(id)
                    } else {
                        node.right.unwrap_or(id)
                    }
                }
            }
        }
    }

    /// Node ids visited from the root to the leaf reached by `row`.
    pub(crate) fn path_of(&self, row: &[f64]) -> Vec<usize> {
        let mut path = Vec::with_capacity(16);
        let mut id = 0;
        loop {
            path.push(id);
            let node = &self.nodes[id];
            match &node.split {
                None => return path,
                Some(split) => {
                    id = if split.goes_left(row) {
                        node.left.unwrap_or(id)
                    } else {
                        node.right.unwrap_or(id)
                    }
                }
            }
        }
    }

    fn check_width(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.n_features {
            return Err(Error::WidthMismatch {
                expected: self.n_features,
                got: row.len(),
            });
        }
        Ok(())
    }

    /// Id of the leaf reached by `row`.
    pub fn leaf_index(&self, row: &[f64]) -> Result<usize> {
        self.check_width(row)?;
        Ok(self.leaf_of(row))
    }

    pub fn predict(&self, row: &[f64]) -> Result<f64> {
        self.check_width(row)?;
        Ok(self.nodes[self.leaf_of(row)].value)
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, row: &[f64]) -> f64 {
        self.nodes[self.leaf_of(row)].value
    }

    /// Row indices (from `rows`) routed through each node.
    pub fn node_members(&self, x: &FeatureMatrix, rows: &[usize]) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.nodes.len()];
        for &r in rows {
            for id in self.path_of(x.row(r)) {
                members[id].push(r);
            }
        }
        members
    }

    /// Replace node values with estimates computed from `rows` of `x`.
    ///
    /// `estimate` sees the rows routed through a node and returns `None` when
    /// it cannot produce a value there; such nodes inherit the value of the
    /// nearest ancestor that has one. Returns `None` when the root itself has
    /// no estimate.
    pub fn reestimate<F>(&self, x: &FeatureMatrix, rows: &[usize], estimate: F) -> Option<FittedTree>
    where
        F: Fn(&[usize]) -> Option<f64>,
    {
        let members = self.node_members(x, rows);
        let parents = self.parents();
        let mut nodes = self.nodes.clone();
        let mut resolved = vec![f64::NAN; nodes.len()];
        for i in 0..nodes.len() {
            let own = estimate(&members[i]);
            let value = match own {
                Some(v) => v,
                None if i == 0 => return None,
                None => resolved[parents[i]],
            };
            resolved[i] = value;
            nodes[i].value = value;
            nodes[i].n_node = members[i].len();
            nodes[i].weight = members[i].len() as f64;
            nodes[i].sse = 0.0;
        }
        Some(Self {
            nodes,
            n_features: self.n_features,
            column_kinds: self.column_kinds.clone(),
            complexity_alpha: self.complexity_alpha,
        })
    }

    /// Parent id of every node; the root maps to itself.
    pub(crate) fn parents(&self) -> Vec<usize> {
        let mut parents = vec![0; self.nodes.len()];
        for node in &self.nodes {
            if let (Some(l), Some(r)) = (node.left, node.right) {
                parents[l] = node.node_id;
                parents[r] = node.node_id;
            }
        }
        parents
    }

    /// Structural equality: same shape and the same splits, ignoring values.
    pub fn same_structure(&self, other: &FittedTree) -> bool {
        self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(a, b)| a.split == b.split && a.left == b.left && a.right == b.right)
    }
}
