//! Text envelope for moving fitted models between sites.
//!
//! The envelope carries tree structure, leaf values, node counts and honesty
//! sample sizes. It never carries subject rows or their indices. Layout,
//! one record per LF-terminated line:
//!
//! ```text
//! treeavg-model
//! format_version=1
//! kind=causal_tree
//! site_id=3
//! n_features=5
//! column_kinds=numeric,numeric,numeric,numeric,numeric
//! n_trees=1
//! tree=0 nodes=3 structure_count=250 estimate_count=250 complexity_alpha=0.0
//! node=0 feature=0 threshold=0.1 left=1 right=2 value=0.5 n=250
//! node=1 leaf value=-0.2 n=120
//! node=2 leaf value=1.1 n=130
//! digest=sha256:<hex of every preceding byte>
//! ```
//!
//! Ensemble kinds add `n_sites=K` after `n_features`; categorical splits
//! write `levels=0,2,4` in place of `threshold=`. Reals use the shortest
//! decimal that parses back to the same bits.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::causal::{LocalCateModel, LocalModelKind, TreeHonesty};
use crate::ensemble::{EnsembleKind, EnsembleModel};
use crate::error::{Error, Result};
use crate::tree::{ColumnKind, FittedTree, Split, SplitRule, TreeNode};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "treeavg-model";

#[derive(Clone, Debug, PartialEq)]
pub enum ExchangedModel {
    Local(LocalCateModel),
    Ensemble(EnsembleModel),
}

impl ExchangedModel {
    pub fn envelope(&self) -> String {
        match self {
            ExchangedModel::Local(m) => m.envelope(),
            ExchangedModel::Ensemble(m) => m.envelope(),
        }
    }

    pub fn into_local(self) -> Result<LocalCateModel> {
        match self {
            ExchangedModel::Local(m) => Ok(m),
            ExchangedModel::Ensemble(_) => Err(Error::SchemaError("expected a local model".into())),
        }
    }

    pub fn into_ensemble(self) -> Result<EnsembleModel> {
        match self {
            ExchangedModel::Ensemble(m) => Ok(m),
            ExchangedModel::Local(_) => Err(Error::SchemaError("expected an ensemble model".into())),
        }
    }
}

pub trait Exportable {
    fn envelope(&self) -> String;
}

impl Exportable for LocalCateModel {
    fn envelope(&self) -> String {
        let header = Header {
            kind: self.kind.as_str(),
            site_id: self.site_id,
            n_features: self.n_features(),
            n_sites: None,
        };
        write_envelope(&header, &self.trees, &self.honesty)
    }
}

impl Exportable for EnsembleModel {
    fn envelope(&self) -> String {
        let header = Header {
            kind: self.kind.as_str(),
            site_id: crate::ensemble::TARGET_SITE,
            n_features: self.n_features,
            n_sites: Some(self.n_sites),
        };
        write_envelope(&header, &self.trees, &self.samples)
    }
}

impl Exportable for ExchangedModel {
    fn envelope(&self) -> String {
        ExchangedModel::envelope(self)
    }
}

pub fn export_model<M: Exportable + ?Sized>(model: &M, path: &Path) -> Result<()> {
    std::fs::write(path, model.envelope())?;
    Ok(())
}

pub fn import_model(path: &Path) -> Result<ExchangedModel> {
    parse_envelope(&std::fs::read_to_string(path)?)
}

struct Header<'a> {
    kind: &'a str,
    site_id: usize,
    n_features: usize,
    n_sites: Option<usize>,
}

fn real(v: f64) -> String {
    format!("{v:?}")
}

fn kind_text(k: &ColumnKind) -> String {
    match k {
        ColumnKind::Numeric => "numeric".into(),
        ColumnKind::Categorical { levels } => format!("categorical:{levels}"),
    }
}

fn digest_of(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

fn write_envelope(h: &Header, trees: &[FittedTree], samples: &[TreeHonesty]) -> String {
    let mut s = String::new();
    let kinds = trees.first().map_or(Vec::new(), |t| t.column_kinds().to_vec());
    // writing into a String cannot fail
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "format_version={FORMAT_VERSION}");
    let _ = writeln!(s, "kind={}", h.kind);
    let _ = writeln!(s, "site_id={}", h.site_id);
    let _ = writeln!(s, "n_features={}", h.n_features);
    if let Some(k) = h.n_sites {
        let _ = writeln!(s, "n_sites={k}");
    }
    let kinds: Vec<String> = kinds.iter().map(kind_text).collect();
    let _ = writeln!(s, "column_kinds={}", kinds.join(","));
    let _ = writeln!(s, "n_trees={}", trees.len());
    for (b, tree) in trees.iter().enumerate() {
        let (sc, ec) = samples.get(b).map_or((0, 0), |h| (h.structure_count, h.estimate_count));
        let _ = writeln!(
            s,
            "tree={b} nodes={} structure_count={sc} estimate_count={ec} complexity_alpha={}",
            tree.nodes().len(),
            real(tree.complexity_alpha())
        );
        for node in tree.nodes() {
            match &node.split {
                None => {
                    let _ = writeln!(s, "node={} leaf value={} n={}", node.node_id, real(node.value), node.n_node);
                }
                Some(split) => {
                    let rule = match &split.rule {
                        SplitRule::Threshold(t) => format!("threshold={}", real(*t)),
                        SplitRule::Levels(set) => {
                            let l: Vec<String> = set.iter().map(u32::to_string).collect();
                            format!("levels={}", l.join(","))
                        }
                    };
                    let _ = writeln!(
                        s,
                        "node={} feature={} {rule} left={} right={} value={} n={}",
                        node.node_id,
                        split.feature,
                        node.left.unwrap_or(0),
                        node.right.unwrap_or(0),
                        real(node.value),
                        node.n_node
                    );
                }
            }
        }
    }
    let d = digest_of(&s);
    let _ = writeln!(s, "digest=sha256:{d}");
    s
}

fn schema(msg: impl Into<String>) -> Error {
    Error::SchemaError(msg.into())
}

struct Lines<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.lines.next().ok_or_else(|| schema(format!("envelope ends before {what}")))
    }

    fn key(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next(key)?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| schema(format!("expected `{key}=`, found `{line}`")))
    }

    fn peek_key(&mut self, key: &str) -> bool {
        self.lines.peek().is_some_and(|l| l.starts_with(&format!("{key}=")))
    }
}

fn num<T: std::str::FromStr>(v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| schema(format!("bad {what}: `{v}`")))
}

fn finite(v: &str, what: &str) -> Result<f64> {
    let x: f64 = num(v, what)?;
    if !x.is_finite() {
        return Err(schema(format!("{what} is not finite")));
    }
    Ok(x)
}

/// `key=value` fields of a record line, in order.
fn fields(line: &str) -> Vec<(&str, &str)> {
    line.split(' ')
        .map(|f| f.split_once('=').unwrap_or((f, "")))
        .collect()
}

fn field<'a>(fs: &[(&'a str, &'a str)], pos: usize, key: &str, ctx: &str) -> Result<&'a str> {
    match fs.get(pos) {
        Some(&(k, v)) if k == key => Ok(v),
        _ => Err(schema(format!("{ctx}: expected field `{key}`"))),
    }
}

fn parse_kind(v: &str) -> Result<ColumnKind> {
    if v == "numeric" {
        return Ok(ColumnKind::Numeric);
    }
    v.strip_prefix("categorical:")
        .and_then(|l| l.parse().ok())
        .map(|levels| ColumnKind::Categorical { levels })
        .ok_or_else(|| schema(format!("unknown column kind `{v}`")))
}

fn parse_node(line: &str, tree: usize, expect_id: usize) -> Result<TreeNode> {
    let fs = fields(line);
    let id: usize = num(field(&fs, 0, "node", "node record")?, "node id")?;
    let ctx = format!("tree {tree} node {id}");
    if id != expect_id {
        return Err(schema(format!("{ctx}: expected node_id {expect_id}")));
    }
    if fs.get(1).map(|f| f.0) == Some("leaf") {
        if fs.len() != 4 {
            return Err(schema(format!("{ctx}: malformed leaf record")));
        }
        let value = finite(field(&fs, 2, "value", &ctx)?, "leaf value")?;
        let n: usize = num(field(&fs, 3, "n", &ctx)?, "n_node")?;
        return Ok(TreeNode::leaf(id, value, n, n as f64, 0.0));
    }
    let feature: usize = num(field(&fs, 1, "feature", &ctx)?, "feature")?;
    let rule = match fs.get(2) {
        Some(&("threshold", v)) => SplitRule::Threshold(finite(v, "threshold")?),
        Some(&("levels", v)) => {
            let mut set: Vec<u32> = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|l| num(l, "level")).collect::<Result<_>>()?
            };
            set.sort_unstable();
            set.dedup();
            SplitRule::Levels(set)
        }
        _ => return Err(schema(format!("{ctx}: expected `threshold=` or `levels=`"))),
    };
    let left = fs.iter().find(|f| f.0 == "left");
    let right = fs.iter().find(|f| f.0 == "right");
    let (Some(&(_, l)), Some(&(_, r))) = (left, right) else {
        return Err(schema(format!("internal node {id} (tree {tree}) is missing a child")));
    };
    if fs.len() != 7 {
        return Err(schema(format!("{ctx}: malformed split record")));
    }
    let value = finite(field(&fs, 5, "value", &ctx)?, "node value")?;
    let n: usize = num(field(&fs, 6, "n", &ctx)?, "n_node")?;
    Ok(TreeNode {
        node_id: id,
        split: Some(Split { feature, rule }),
        left: Some(num(l, "left child")?),
        right: Some(num(r, "right child")?),
        value,
        n_node: n,
        weight: n as f64,
        sse: 0.0,
    })
}

/// Parse and verify an envelope.
pub fn parse_envelope(text: &str) -> Result<ExchangedModel> {
    let mut lines = Lines {
        lines: text.lines().peekable(),
    };
    if lines.next("magic")? != MAGIC {
        return Err(schema("not a model envelope"));
    }
    let version: u32 = num(lines.key("format_version")?, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }

    let (body, digest_line) = text
        .trim_end_matches('\n')
        .rsplit_once('\n')
        .ok_or_else(|| schema("envelope has no digest"))?;
    let recorded = digest_line
        .strip_prefix("digest=sha256:")
        .ok_or_else(|| schema("last line is not a digest"))?;
    let computed = digest_of(&format!("{body}\n"));
    if recorded != computed {
        return Err(Error::DigestMismatch {
            recorded: recorded.to_string(),
            computed,
        });
    }

    let kind = lines.key("kind")?;
    let site_id: usize = num(lines.key("site_id")?, "site_id")?;
    let n_features: usize = num(lines.key("n_features")?, "n_features")?;
    let n_sites: Option<usize> = if lines.peek_key("n_sites") {
        Some(num(lines.key("n_sites")?, "n_sites")?)
    } else {
        None
    };
    let kinds_text = lines.key("column_kinds")?;
    let column_kinds: Vec<ColumnKind> = if kinds_text.is_empty() {
        Vec::new()
    } else {
        kinds_text.split(',').map(parse_kind).collect::<Result<_>>()?
    };
    let n_trees: usize = num(lines.key("n_trees")?, "n_trees")?;
    if n_trees == 0 {
        return Err(schema("model has no trees"));
    }

    let mut trees = Vec::with_capacity(n_trees);
    let mut samples = Vec::with_capacity(n_trees);
    for b in 0..n_trees {
        let line = lines.next("tree header")?;
        let fs = fields(line);
        let ctx = format!("tree {b}");
        if num::<usize>(field(&fs, 0, "tree", &ctx)?, "tree index")? != b {
            return Err(schema(format!("{ctx}: out of order")));
        }
        let n_nodes: usize = num(field(&fs, 1, "nodes", &ctx)?, "node count")?;
        let sc: usize = num(field(&fs, 2, "structure_count", &ctx)?, "structure_count")?;
        let ec: usize = num(field(&fs, 3, "estimate_count", &ctx)?, "estimate_count")?;
        let alpha = finite(field(&fs, 4, "complexity_alpha", &ctx)?, "complexity_alpha")?;
        let nodes = (0..n_nodes)
            .map(|i| parse_node(lines.next("node record")?, b, i))
            .collect::<Result<Vec<_>>>()?;
        trees.push(FittedTree::from_nodes(nodes, column_kinds.clone(), alpha)?);
        samples.push(TreeHonesty::counts(sc, ec));
    }
    if lines.next("digest")? != digest_line {
        return Err(schema("unexpected records before the digest"));
    }

    let model = match (kind, n_sites) {
        ("causal_tree" | "causal_forest", None) => {
            if column_kinds.len() != n_features {
                return Err(schema("column_kinds does not match n_features"));
            }
            let kind = if kind == "causal_tree" {
                LocalModelKind::CausalTree
            } else {
                LocalModelKind::CausalForest
            };
            ExchangedModel::Local(LocalCateModel {
                site_id,
                kind,
                trees,
                honesty: samples,
            })
        }
        ("ensemble_tree" | "ensemble_forest", Some(k)) => {
            if column_kinds.len() != n_features + 1
                || column_kinds.last() != Some(&ColumnKind::Categorical { levels: k as u32 })
            {
                return Err(schema("ensemble column_kinds must end with the site column"));
            }
            let kind = if kind == "ensemble_tree" {
                EnsembleKind::Tree
            } else {
                EnsembleKind::Forest
            };
            ExchangedModel::Ensemble(EnsembleModel::from_parts(kind, trees, samples, k, n_features))
        }
        _ => return Err(schema(format!("unknown model kind `{kind}`"))),
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump() -> LocalCateModel {
        let nodes = vec![
            TreeNode {
                node_id: 0,
                split: Some(Split {
                    feature: 1,
                    rule: SplitRule::Threshold(0.1),
                }),
                left: Some(1),
                right: Some(2),
                value: 0.5,
                n_node: 10,
                weight: 10.0,
                sse: 0.0,
            },
            TreeNode::leaf(1, -0.2, 4, 4.0, 0.0),
            TreeNode::leaf(2, 1.0 / 3.0, 6, 6.0, 0.0),
        ];
        let tree = FittedTree::from_nodes(nodes, vec![ColumnKind::Numeric; 2], 0.0).unwrap();
        LocalCateModel {
            site_id: 2,
            kind: LocalModelKind::CausalTree,
            trees: vec![tree],
            honesty: vec![TreeHonesty::counts(5, 5)],
        }
    }

    #[test]
    fn round_trip_is_canonical() {
        let m = stump();
        let text = m.envelope();
        let back = parse_envelope(&text).unwrap().into_local().unwrap();
        assert_eq!(back.envelope(), text);
        assert_eq!(back.predict_tau(&[0.0, 1.0]).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn tamper_is_detected() {
        let text = stump().envelope().replace("value=-0.2", "value=-0.3");
        assert!(matches!(parse_envelope(&text), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn future_version_rejected() {
        let text = stump().envelope().replace("format_version=1", "format_version=999");
        assert!(matches!(parse_envelope(&text), Err(Error::UnsupportedVersion(999))));
    }

    #[test]
    fn missing_child_names_node() {
        let text = stump().envelope();
        let body: String = text
            .lines()
            .filter(|l| !l.starts_with("digest="))
            .map(|l| format!("{}\n", l.replace(" right=2", "")))
            .collect();
        let text = format!("{body}digest=sha256:{}\n", digest_of(&body));
        match parse_envelope(&text) {
            Err(Error::SchemaError(msg)) => assert!(msg.contains("node 0"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
