//! Gini decision tree over binary feature matrices and impurity-based
//! feature importance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::scalar::Scalar;

/// `1 - Σ p_i²` over the label counts.
pub fn gini<T: Scalar>(counts: &[usize]) -> Result<T> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("gini of an empty node".into()));
    }
    Ok(gini_unchecked(counts.iter().copied(), total))
}

pub fn gini_of_map<T: Scalar>(counts: &BTreeMap<usize, usize>) -> Result<T> {
    let v: Vec<usize> = counts.values().copied().collect();
    gini(&v)
}

fn gini_unchecked<T: Scalar>(counts: impl Iterator<Item = usize>, total: usize) -> T {
    let n = T::count(total);
    let sq: T = counts
        .map(|c| {
            let p = T::count(c) / n;
            p * p
        })
        .sum();
    T::one() - sq
}

fn label_counts(labels: &[usize], idx: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &i in idx {
        *m.entry(labels[i]).or_default() += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 5,
            min_leaf: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", bound = "T: Scalar")]
pub enum TreeNode<T: Scalar> {
    Internal {
        column: usize,
        gini: T,
        samples: usize,
        weighted_gain: T,
        /// Rows where the column is 0.
        left: Box<TreeNode<T>>,
        /// Rows where the column is 1.
        right: Box<TreeNode<T>>,
    },
    Leaf {
        #[serde(with = "label_keys")]
        class_counts: BTreeMap<usize, usize>,
        predicted: usize,
        gini: T,
        samples: usize,
    },
}

/// Integer map keys do not survive the buffering of internally tagged enums.
mod label_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, usize>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, usize>, D::Error> {
        BTreeMap::<String, usize>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

impl<T: Scalar> TreeNode<T> {
    pub fn samples(&self) -> usize {
        match self {
            TreeNode::Internal { samples, .. } | TreeNode::Leaf { samples, .. } => *samples,
        }
    }

    pub fn gini(&self) -> T {
        match self {
            TreeNode::Internal { gini, .. } | TreeNode::Leaf { gini, .. } => *gini,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    pub fn split_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.split_count() + right.split_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn predict(&self, row: &[u8]) -> usize {
        match self {
            TreeNode::Leaf { predicted, .. } => *predicted,
            TreeNode::Internal {
                column, left, right, ..
            } => {
                if row[*column] == 0 {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }

    /// Indented if/else rendering with `column_names` for the split tests.
    pub fn rules(&self, column_names: &[String]) -> String {
        let mut out = String::new();
        self.write_rules(column_names, 0, &mut out);
        out
    }

    fn write_rules(&self, names: &[String], depth: usize, out: &mut String) {
        let pad = "    ".repeat(depth);
        match self {
            TreeNode::Leaf {
                class_counts,
                predicted,
                samples,
                ..
            } => {
                let counts: Vec<String> = class_counts.iter().map(|(l, c)| format!("{l}: {c}")).collect();
                let _ = writeln!(
                    out,
                    "{pad}predict cluster {predicted} (samples={samples}, counts={{{}}})",
                    counts.join(", ")
                );
            }
            TreeNode::Internal {
                column,
                samples,
                weighted_gain,
                left,
                right,
                ..
            } => {
                let name = names.get(*column).map(String::as_str).unwrap_or("?");
                let _ = writeln!(
                    out,
                    "{pad}if {name} present: (samples={samples}, gain={:.3})",
                    weighted_gain.as_f64()
                );
                right.write_rules(names, depth + 1, out);
                let _ = writeln!(out, "{pad}else:");
                left.write_rules(names, depth + 1, out);
            }
        }
    }
}

/// Best binary split with every child allowed to be a single row.
pub fn best_split<T: Scalar>(rows: &[&[u8]], labels: &[usize]) -> Option<(usize, T)> {
    best_split_with(rows, labels, 1)
}

/// Maximum Gini gain over all columns, lowest column index on ties.
/// `None` when no column yields a positive gain with both children holding at least `min_leaf` rows.
pub fn best_split_with<T: Scalar>(rows: &[&[u8]], labels: &[usize], min_leaf: usize) -> Option<(usize, T)> {
    if rows.len() < 2 {
        return None;
    }
    let n = rows.len();
    let all: Vec<usize> = (0..n).collect();
    let parent_counts = label_counts(labels, &all);
    let parent: T = gini_unchecked(parent_counts.values().copied(), n);
    let width = rows[0].len();
    let eps = T::lit(1e-12);
    let mut best: Option<(usize, T)> = None;
    for col in 0..width {
        let mut left: BTreeMap<usize, usize> = BTreeMap::new();
        let mut right: BTreeMap<usize, usize> = BTreeMap::new();
        for (row, &lab) in rows.iter().zip(labels) {
            let side = if row[col] == 0 { &mut left } else { &mut right };
            *side.entry(lab).or_default() += 1;
        }
        let nl: usize = left.values().sum();
        let nr: usize = right.values().sum();
        if nl < min_leaf.max(1) || nr < min_leaf.max(1) {
            continue;
        }
        let gl: T = gini_unchecked(left.values().copied(), nl);
        let gr: T = gini_unchecked(right.values().copied(), nr);
        let nt = T::count(n);
        let gain = parent - T::count(nl) / nt * gl - T::count(nr) / nt * gr;
        if gain <= eps {
            continue;
        }
        if best.is_none_or(|(_, g)| gain > g + eps) {
            best = Some((col, gain));
        }
    }
    best
}

/// Greedy recursive tree over the rows of `matrix` with its row labels as targets.
pub fn train_tree<T: Scalar>(matrix: &FeatureMatrix, params: TreeParams) -> Result<TreeNode<T>> {
    if matrix.rows.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty matrix".into()));
    }
    Ok(train_rows(&matrix.rows, &matrix.row_labels, params))
}

pub fn train_rows<T: Scalar>(rows: &[Vec<u8>], labels: &[usize], params: TreeParams) -> TreeNode<T> {
    let idx: Vec<usize> = (0..rows.len()).collect();
    grow(rows, labels, &idx, 0, params)
}

fn grow<T: Scalar>(rows: &[Vec<u8>], labels: &[usize], idx: &[usize], depth: usize, params: TreeParams) -> TreeNode<T> {
    let counts = label_counts(labels, idx);
    let g: T = gini_unchecked(counts.values().copied(), idx.len());
    let leaf = |counts: BTreeMap<usize, usize>| {
        let best = counts.values().copied().max().unwrap_or(0);
        let predicted = counts.iter().find(|(_, &c)| c == best).map(|(&l, _)| l).unwrap_or(0);
        TreeNode::Leaf {
            class_counts: counts,
            predicted,
            gini: g,
            samples: idx.len(),
        }
    };
    let min_leaf = params.min_leaf.max(1);
    if depth >= params.max_depth || counts.len() <= 1 || idx.len() < 2 * min_leaf {
        return leaf(counts);
    }
    let sub_rows: Vec<&[u8]> = idx.iter().map(|&i| rows[i].as_slice()).collect();
    let sub_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let Some((column, gain)) = best_split_with::<T>(&sub_rows, &sub_labels, min_leaf) else {
        return leaf(counts);
    };
    let (right_idx, left_idx): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][column] != 0);
    TreeNode::Internal {
        column,
        gini: g,
        samples: idx.len(),
        weighted_gain: gain,
        left: Box::new(grow(rows, labels, &left_idx, depth + 1, params)),
        right: Box::new(grow(rows, labels, &right_idx, depth + 1, params)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ImportanceReport<T: Scalar> {
    pub node_name: String,
    pub column_names: Vec<String>,
    pub column_importances: Vec<T>,
    pub class_importances: BTreeMap<String, T>,
    pub max_class_importance: T,
    /// Tree without any split; all importances are zero.
    pub uninformative: bool,
}

impl<T: Scalar> ImportanceReport<T> {
    /// Classes by descending importance, ties by name.
    pub fn ranked_classes(&self) -> Vec<(&str, T)> {
        let mut v: Vec<(&str, T)> = self.class_importances.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(b.0)));
        v
    }
}

/// Raw (unnormalized) per-column sums of `samples / total * weighted_gain`.
pub fn raw_importances<T: Scalar>(tree: &TreeNode<T>, width: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); width];
    let total = T::count(tree.samples().max(1));
    fn walk<T: Scalar>(node: &TreeNode<T>, total: T, acc: &mut [T]) {
        if let TreeNode::Internal {
            column,
            samples,
            weighted_gain,
            left,
            right,
            ..
        } = node
        {
            acc[*column] = acc[*column] + T::count(*samples) / total * *weighted_gain;
            walk(left, total, acc);
            walk(right, total, acc);
        }
    }
    walk(tree, total, &mut acc);
    acc
}

pub fn feature_importance<T: Scalar>(tree: &TreeNode<T>, matrix: &FeatureMatrix) -> ImportanceReport<T> {
    let width = matrix.columns.len();
    let mut cols = raw_importances(tree, width);
    let sum: T = cols.iter().copied().sum();
    let uninformative = tree.is_leaf() || sum <= T::zero();
    if !uninformative {
        for c in &mut cols {
            *c = *c / sum;
        }
    } else {
        cols.iter_mut().for_each(|c| *c = T::zero());
    }
    let mut classes: BTreeMap<String, T> = BTreeMap::new();
    for (col, imp) in matrix.columns.iter().zip(&cols) {
        let e = classes.entry(col.class.clone()).or_insert(T::zero());
        *e = *e + *imp;
    }
    let max = classes.values().copied().fold(T::zero(), T::max);
    ImportanceReport {
        node_name: matrix.node_name.clone(),
        column_names: matrix.column_names(),
        column_importances: cols,
        class_importances: classes,
        max_class_importance: max,
        uninformative,
    }
}

pub const REASON_INSUFFICIENT: &str = "insufficient explanatory power";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFilter {
    pub included: Vec<String>,
    pub excluded: Vec<(String, String)>,
}

/// Keeps nodes whose strongest feature class importance exceeds `threshold`.
pub fn filter_nodes<T: Scalar>(reports: &BTreeMap<String, ImportanceReport<T>>, threshold: f64) -> NodeFilter {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for (node, r) in reports {
        if !r.uninformative && r.max_class_importance > T::lit(threshold) {
            included.push(node.clone());
        } else {
            excluded.push((node.clone(), REASON_INSUFFICIENT.to_string()));
        }
    }
    NodeFilter { included, excluded }
}

/// Training misclassification count.
pub fn training_errors<T: Scalar>(tree: &TreeNode<T>, rows: &[Vec<u8>], labels: &[usize]) -> usize {
    rows.iter().zip(labels).filter(|(r, &l)| tree.predict(r) != l).count()
}

/// Distinct labels present in a slice, sorted.
pub fn label_set(labels: &[usize]) -> BTreeSet<usize> {
    labels.iter().copied().collect()
}
