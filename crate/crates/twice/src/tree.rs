//! Weighted least-squares regression trees with best-first growth.
//!
//! Growth is leaf-budgeted rather than depth-budgeted: at every step the
//! frontier leaf whose best admissible split yields the greatest weighted
//! SSE reduction is split, until `max_leaves` is reached or no admissible
//! split remains. Numeric split candidates are weighted per-column quantile
//! thresholds (histogram style); categorical splits order the node's levels
//! by mean target and scan binary cuts of that ordering. Ties are resolved
//! totally (higher gain, then lower column index, then lower threshold or
//! shorter left level set, then lower frontier node id), so refits on
//! identical inputs are bit-identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FeatureColumn, FeatureKind, FeatureMatrix, FeatureSchema, Value};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("empty input")]
    EmptyInput,
    #[error("all weights are zero")]
    AllWeightsZero,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

/// Options controlling tree growth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeFitConfig {
    /// Leaf budget; growth stops when reached. Must be >= 1.
    pub max_leaves: usize,
    /// Maximum node depth (root = 0); a node at this depth is never split.
    pub max_depth: usize,
    /// Minimum total training weight each child must keep.
    pub min_leaf_size: f64,
    /// Number of weighted-quantile split candidates per numeric column.
    pub numeric_candidates: usize,
    /// Reserved for subsampling extensions; fitting itself is deterministic.
    pub seed: u64,
}

impl Default for TreeFitConfig {
    fn default() -> Self {
        Self { max_leaves: 31, max_depth: 15, min_leaf_size: 30.0, numeric_candidates: 255, seed: 0 }
    }
}

/// Routing rule of an internal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum SplitRule {
    /// Rows with `value < threshold` go left.
    Numeric { column: usize, threshold: f64 },
    /// Rows whose code is in `left_levels` go left, in `right_levels` right;
    /// codes unseen at fit time follow the node's default branch.
    Categorical { column: usize, left_levels: Vec<u32>, right_levels: Vec<u32> },
}

impl SplitRule {
    pub fn column(&self) -> usize {
        match self {
            SplitRule::Numeric { column, .. } | SplitRule::Categorical { column, .. } => *column,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "node")]
pub enum Node {
    Leaf {
        prediction: f64,
        weight: f64,
    },
    Split {
        #[serde(flatten)]
        rule: SplitRule,
        /// Weighted SSE reduction realized by this split.
        gain: f64,
        /// Fallback branch for categorical codes unseen at fit time
        /// (the heavier child; ties go left).
        default_left: bool,
        left: usize,
        right: usize,
    },
}

/// Tree structure without its feature schema. Ensembles share one schema
/// across many bodies; standalone trees wrap a body in [`RegressionTree`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeBody {
    /// Node 0 is the root; leaves are identified by node index.
    pub nodes: Vec<Node>,
    pub n_leaves: usize,
}

/// A fitted regression tree with its feature schema attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub format_version: u32,
    pub schema: FeatureSchema,
    #[serde(flatten)]
    pub body: TreeBody,
}

pub const TREE_FORMAT_VERSION: u32 = 1;

struct ColumnBins {
    /// Per-row bin index. For numeric columns, bin = count of candidate
    /// thresholds <= value, so candidate j splits bins < j from bins >= j.
    bins: Vec<u32>,
    n_bins: usize,
    /// Ascending candidate thresholds (numeric columns only).
    thresholds: Vec<f64>,
    categorical: bool,
}

fn bin_numeric(values: &[f64], weights: &[f64], n_candidates: usize) -> ColumnBins {
    let mut order: Vec<u32> = (0..values.len() as u32).collect();
    order.sort_by(|&a, &b| {
        values[a as usize].partial_cmp(&values[b as usize]).expect("finite covariates")
    });
    // aggregate duplicate values
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &r in &order {
        let (v, w) = (values[r as usize], weights[r as usize]);
        match distinct.last_mut() {
            Some(last) if last.0 == v => last.1 += w,
            _ => distinct.push((v, w)),
        }
    }
    let thresholds: Vec<f64> = if distinct.len() <= n_candidates + 1 {
        distinct.iter().skip(1).map(|&(v, _)| v).collect()
    } else {
        let total: f64 = distinct.iter().map(|&(_, w)| w).sum();
        let mut cum = 0.0;
        let mut below: Vec<f64> = Vec::with_capacity(distinct.len());
        for &(_, w) in &distinct {
            below.push(cum);
            cum += w;
        }
        let mut picked = Vec::with_capacity(n_candidates);
        let mut i = 1usize;
        for k in 1..=n_candidates {
            let target = total * k as f64 / (n_candidates + 1) as f64;
            while i < distinct.len() && below[i] < target {
                i += 1;
            }
            if i >= distinct.len() {
                break;
            }
            if picked.last() != Some(&distinct[i].0) {
                picked.push(distinct[i].0);
            }
        }
        picked
    };
    let bins =
        values.iter().map(|&v| thresholds.partition_point(|&t| t <= v) as u32).collect();
    ColumnBins { bins, n_bins: thresholds.len() + 1, thresholds, categorical: false }
}

#[derive(Clone)]
struct Candidate {
    gain: f64,
    rule: SplitRule,
    default_left: bool,
}

/// Scans one column's histogram for the best admissible split of a node.
fn best_split_for_column(
    col_bins: &ColumnBins,
    column: usize,
    rows: &[u32],
    targets: &[f64],
    weights: &[f64],
    sum_w: f64,
    sum_wy: f64,
    min_leaf: f64,
) -> Option<Candidate> {
    let mut hist_w = vec![0.0f64; col_bins.n_bins];
    let mut hist_wy = vec![0.0f64; col_bins.n_bins];
    for &r in rows {
        let b = col_bins.bins[r as usize] as usize;
        hist_w[b] += weights[r as usize];
        hist_wy[b] += targets[r as usize] * weights[r as usize];
    }
    let parent_score = sum_wy * sum_wy / sum_w;

    if !col_bins.categorical {
        let mut best: Option<(f64, usize)> = None;
        let (mut lw, mut ls) = (0.0, 0.0);
        for j in 1..col_bins.n_bins {
            lw += hist_w[j - 1];
            ls += hist_wy[j - 1];
            let (rw, rs) = (sum_w - lw, sum_wy - ls);
            if lw < min_leaf || rw < min_leaf || lw <= 0.0 || rw <= 0.0 {
                continue;
            }
            let gain = ls * ls / lw + rs * rs / rw - parent_score;
            if gain > 0.0 && best.map_or(true, |(g, _)| gain > g) {
                best = Some((gain, j));
            }
        }
        best.map(|(gain, j)| {
            let lw: f64 = hist_w[..j].iter().sum();
            Candidate {
                gain,
                rule: SplitRule::Numeric { column, threshold: col_bins.thresholds[j - 1] },
                default_left: lw >= sum_w - lw,
            }
        })
    } else {
        // order present levels by mean target, ties by lower code
        let mut levels: Vec<u32> =
            (0..col_bins.n_bins as u32).filter(|&c| hist_w[c as usize] > 0.0).collect();
        if levels.len() < 2 {
            return None;
        }
        levels.sort_by(|&a, &b| {
            let ma = hist_wy[a as usize] / hist_w[a as usize];
            let mb = hist_wy[b as usize] / hist_w[b as usize];
            ma.partial_cmp(&mb).expect("finite targets").then(a.cmp(&b))
        });
        let mut best: Option<(f64, usize)> = None;
        let (mut lw, mut ls) = (0.0, 0.0);
        for cut in 1..levels.len() {
            let c = levels[cut - 1] as usize;
            lw += hist_w[c];
            ls += hist_wy[c];
            let (rw, rs) = (sum_w - lw, sum_wy - ls);
            if lw < min_leaf || rw < min_leaf {
                continue;
            }
            let gain = ls * ls / lw + rs * rs / rw - parent_score;
            if gain > 0.0 && best.map_or(true, |(g, _)| gain > g) {
                best = Some((gain, cut));
            }
        }
        best.map(|(gain, cut)| {
            let mut left_levels: Vec<u32> = levels[..cut].to_vec();
            let mut right_levels: Vec<u32> = levels[cut..].to_vec();
            left_levels.sort_unstable();
            right_levels.sort_unstable();
            let lw: f64 = left_levels.iter().map(|&c| hist_w[c as usize]).sum();
            Candidate {
                gain,
                rule: SplitRule::Categorical { column, left_levels, right_levels },
                default_left: lw >= sum_w - lw,
            }
        })
    }
}

struct Pending {
    node: usize,
    depth: usize,
    rows: Vec<u32>,
    best: Option<Candidate>,
}

fn evaluate_node(
    bins: &[ColumnBins],
    rows: &[u32],
    targets: &[f64],
    weights: &[f64],
    sum_w: f64,
    sum_wy: f64,
    cfg: &TreeFitConfig,
) -> Option<Candidate> {
    let per_column: Vec<Option<Candidate>> = bins
        .par_iter()
        .enumerate()
        .map(|(c, cb)| {
            best_split_for_column(cb, c, rows, targets, weights, sum_w, sum_wy, cfg.min_leaf_size)
        })
        .collect();
    // sequential reduce in column order: strict > keeps the lower column on ties
    let mut best: Option<Candidate> = None;
    for cand in per_column.into_iter().flatten() {
        if best.as_ref().map_or(true, |b| cand.gain > b.gain) {
            best = Some(cand);
        }
    }
    best
}

/// Fits a weighted regression tree.
pub fn fit_tree(
    features: &FeatureMatrix,
    targets: &[f64],
    weights: &[f64],
    config: &TreeFitConfig,
) -> Result<RegressionTree, TreeError> {
    let body = fit_tree_body(features, targets, weights, config)?;
    Ok(RegressionTree {
        format_version: TREE_FORMAT_VERSION,
        schema: features.schema().clone(),
        body,
    })
}

/// Fits a tree body without attaching the schema (ensembles share one).
pub fn fit_tree_body(
    features: &FeatureMatrix,
    targets: &[f64],
    weights: &[f64],
    config: &TreeFitConfig,
) -> Result<TreeBody, TreeError> {
    let n = features.n_rows();
    if n == 0 {
        return Err(TreeError::EmptyInput);
    }
    if targets.len() != n || weights.len() != n {
        return Err(TreeError::SchemaMismatch(format!(
            "{} rows but {} targets / {} weights",
            n,
            targets.len(),
            weights.len()
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) || weights.iter().any(|w| !w.is_finite() || *w < 0.0)
    {
        return Err(TreeError::SchemaMismatch("non-finite target or invalid weight".into()));
    }
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Err(TreeError::AllWeightsZero);
    }
    assert!(config.max_leaves >= 1, "max_leaves must be >= 1");

    let bins: Vec<ColumnBins> = (0..features.n_cols())
        .map(|c| match features.column(c) {
            FeatureColumn::Numeric(values) => {
                bin_numeric(values, weights, config.numeric_candidates)
            }
            FeatureColumn::Categorical(codes) => {
                let card = features.schema().features[c].cardinality() as usize;
                ColumnBins {
                    bins: codes.clone(),
                    n_bins: card.max(1),
                    thresholds: Vec::new(),
                    categorical: true,
                }
            }
        })
        .collect();

    let root_rows: Vec<u32> = (0..n as u32).filter(|&r| weights[r as usize] > 0.0).collect();
    let sum_wy: f64 = root_rows.iter().map(|&r| targets[r as usize] * weights[r as usize]).sum();
    let mut nodes = vec![Node::Leaf { prediction: sum_wy / total_w, weight: total_w }];
    let mut frontier: Vec<Pending> = Vec::new();
    let root_best = if config.max_depth > 0 && config.max_leaves > 1 {
        evaluate_node(&bins, &root_rows, targets, weights, total_w, sum_wy, config)
    } else {
        None
    };
    frontier.push(Pending { node: 0, depth: 0, rows: root_rows, best: root_best });
    let mut n_leaves = 1usize;

    while n_leaves < config.max_leaves {
        // frontier is in node-creation order; strict > keeps the lowest node id on ties
        let mut pick: Option<usize> = None;
        for (i, p) in frontier.iter().enumerate() {
            if let Some(c) = &p.best {
                if pick.map_or(true, |j| {
                    c.gain > frontier[j].best.as_ref().expect("picked entries have splits").gain
                }) {
                    pick = Some(i);
                }
            }
        }
        let Some(i) = pick else { break };
        let Pending { node, depth, rows, best } = frontier.remove(i);
        let cand = best.expect("picked entries have splits");

        // resolve the numeric rule back to a bin cut once, not per row
        let numeric_cut: Option<(usize, u32)> = match &cand.rule {
            SplitRule::Numeric { column, threshold } => {
                let j = bins[*column].thresholds.partition_point(|&t| t < *threshold) + 1;
                Some((*column, j as u32))
            }
            SplitRule::Categorical { .. } => None,
        };

        let mut left_rows = Vec::with_capacity(rows.len() / 2);
        let mut right_rows = Vec::with_capacity(rows.len() / 2);
        for &r in &rows {
            let left = match (&cand.rule, numeric_cut) {
                (SplitRule::Numeric { .. }, Some((col, j))) => bins[col].bins[r as usize] < j,
                (SplitRule::Categorical { column, left_levels, .. }, _) => {
                    left_levels.binary_search(&bins[*column].bins[r as usize]).is_ok()
                }
                _ => unreachable!(),
            };
            if left {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }

        let stats = |rs: &[u32]| -> (f64, f64) {
            let mut w = 0.0;
            let mut wy = 0.0;
            for &r in rs {
                w += weights[r as usize];
                wy += targets[r as usize] * weights[r as usize];
            }
            (w, wy)
        };
        let (lw, ls) = stats(&left_rows);
        let (rw, rs) = stats(&right_rows);
        let left_id = nodes.len();
        let right_id = left_id + 1;
        nodes.push(Node::Leaf { prediction: ls / lw, weight: lw });
        nodes.push(Node::Leaf { prediction: rs / rw, weight: rw });
        nodes[node] = Node::Split {
            rule: cand.rule,
            gain: cand.gain,
            default_left: cand.default_left,
            left: left_id,
            right: right_id,
        };
        n_leaves += 1;

        if n_leaves < config.max_leaves && depth + 1 < config.max_depth {
            let lb = evaluate_node(&bins, &left_rows, targets, weights, lw, ls, config);
            frontier.push(Pending { node: left_id, depth: depth + 1, rows: left_rows, best: lb });
            let rb = evaluate_node(&bins, &right_rows, targets, weights, rw, rs, config);
            frontier.push(Pending { node: right_id, depth: depth + 1, rows: right_rows, best: rb });
        }
    }

    Ok(TreeBody { nodes, n_leaves })
}

impl TreeBody {
    /// Node index of the leaf a row routes to. No schema check; callers
    /// validate once per matrix.
    pub fn leaf_of(&self, features: &FeatureMatrix, row: usize) -> usize {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split { rule, default_left, left, right, .. } => {
                    let go_left = match rule {
                        SplitRule::Numeric { column, threshold } => {
                            match features.value(row, *column) {
                                Value::Numeric(v) => v < *threshold,
                                Value::Categorical(_) => false,
                            }
                        }
                        SplitRule::Categorical { column, left_levels, right_levels } => {
                            match features.value(row, *column) {
                                Value::Categorical(c) => {
                                    if left_levels.binary_search(&c).is_ok() {
                                        true
                                    } else if right_levels.binary_search(&c).is_ok() {
                                        false
                                    } else {
                                        *default_left
                                    }
                                }
                                Value::Numeric(_) => *default_left,
                            }
                        }
                    };
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict_row(&self, features: &FeatureMatrix, row: usize) -> f64 {
        match self.nodes[self.leaf_of(features, row)] {
            Node::Leaf { prediction, .. } => prediction,
            Node::Split { .. } => unreachable!("leaf_of returns leaves"),
        }
    }

    /// Leaf node indices in left-to-right (in-order) traversal order.
    pub fn leaves_left_to_right(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_leaves);
        let mut stack = vec![0usize];
        while let Some(at) = stack.pop() {
            match &self.nodes[at] {
                Node::Leaf { .. } => out.push(at),
                Node::Split { left, right, .. } => {
                    stack.push(*right);
                    stack.push(*left);
                }
            }
        }
        out
    }

    /// Total split gain attributed to each of `n_cols` feature columns.
    pub fn feature_gains(&self, n_cols: usize) -> Vec<f64> {
        let mut gains = vec![0.0; n_cols];
        for node in &self.nodes {
            if let Node::Split { rule, gain, .. } = node {
                gains[rule.column()] += gain;
            }
        }
        gains
    }

    /// Root-to-leaf routing conditions for one leaf, as (rule, went_left).
    pub fn path_to(&self, leaf: usize) -> Vec<(SplitRule, bool)> {
        // trees are small; a parent scan is clearer than stored parent links
        let mut parent: Vec<Option<(usize, bool)>> = vec![None; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if let Node::Split { left, right, .. } = n {
                parent[*left] = Some((i, true));
                parent[*right] = Some((i, false));
            }
        }
        let mut path = Vec::new();
        let mut at = leaf;
        while let Some((p, went_left)) = parent[at] {
            if let Node::Split { rule, .. } = &self.nodes[p] {
                path.push((rule.clone(), went_left));
            }
            at = p;
        }
        path.reverse();
        path
    }
}

impl RegressionTree {
    /// Checks that `other` can be routed by this tree: same column names and
    /// kinds, with fit-time level dictionaries being prefixes of the
    /// prediction-time ones (codes keep their meaning; new levels allowed).
    pub fn check_schema(&self, other: &FeatureSchema) -> Result<(), TreeError> {
        check_schema_extends(&self.schema, other)
    }

    pub fn n_leaves(&self) -> usize {
        self.body.n_leaves
    }

    pub fn nodes(&self) -> &[Node] {
        &self.body.nodes
    }

    pub fn leaf_of(&self, features: &FeatureMatrix, row: usize) -> usize {
        self.body.leaf_of(features, row)
    }

    pub fn predict_row(&self, features: &FeatureMatrix, row: usize) -> f64 {
        self.body.predict_row(features, row)
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, TreeError> {
        self.check_schema(features.schema())?;
        Ok((0..features.n_rows()).map(|r| self.body.predict_row(features, r)).collect())
    }

    pub fn leaves_left_to_right(&self) -> Vec<usize> {
        self.body.leaves_left_to_right()
    }

    pub fn feature_gains(&self) -> Vec<f64> {
        self.body.feature_gains(self.schema.len())
    }
}

/// Shared schema-compatibility check: `fit` dictionaries must be prefixes of
/// `predict` dictionaries so codes keep their meaning.
pub(crate) fn check_schema_extends(
    fit: &FeatureSchema,
    predict: &FeatureSchema,
) -> Result<(), TreeError> {
    if fit.len() != predict.len() {
        return Err(TreeError::SchemaMismatch(format!(
            "{} fit columns, {} prediction columns",
            fit.len(),
            predict.len()
        )));
    }
    for (a, b) in fit.features.iter().zip(&predict.features) {
        if a.name != b.name {
            return Err(TreeError::SchemaMismatch(format!(
                "column `{}` does not match `{}`",
                a.name, b.name
            )));
        }
        match (&a.kind, &b.kind) {
            (FeatureKind::Numeric, FeatureKind::Numeric) => {}
            (FeatureKind::Categorical { levels: la }, FeatureKind::Categorical { levels: lb }) => {
                if lb.len() < la.len() || la[..] != lb[..la.len()] {
                    return Err(TreeError::SchemaMismatch(format!(
                        "dictionary of `{}` is not an extension of the fit dictionary",
                        a.name
                    )));
                }
            }
            _ => return Err(TreeError::SchemaMismatch(format!("column `{}` changed kind", a.name))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;

    fn numeric_matrix(cols: Vec<(&str, Vec<f64>)>) -> FeatureMatrix {
        let schema =
            FeatureSchema::new(cols.iter().map(|(n, _)| FeatureSpec::numeric(*n)).collect());
        let columns = cols.into_iter().map(|(_, v)| FeatureColumn::Numeric(v)).collect();
        FeatureMatrix::new(schema, columns).unwrap()
    }

    fn unit_weights(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn constant_target_stays_single_leaf() {
        let m = numeric_matrix(vec![("x", (0..50).map(f64::from).collect())]);
        let t = vec![3.25; 50];
        let tree = fit_tree(&m, &t, &unit_weights(50), &TreeFitConfig::default()).unwrap();
        assert_eq!(tree.n_leaves(), 1);
        assert_eq!(tree.predict_row(&m, 7), 3.25);
    }

    #[test]
    fn step_function_splits_at_the_step() {
        let xs: Vec<f64> = (-50..50).map(|i| i as f64 + 0.5).collect();
        let t: Vec<f64> = xs.iter().map(|&x| if x < 0.0 { 0.0 } else { 1.0 }).collect();
        let m = numeric_matrix(vec![("x", xs)]);
        let cfg = TreeFitConfig { max_leaves: 2, min_leaf_size: 1.0, ..Default::default() };
        let tree = fit_tree(&m, &t, &unit_weights(100), &cfg).unwrap();
        match &tree.nodes()[0] {
            Node::Split { rule: SplitRule::Numeric { threshold, .. }, .. } => {
                assert_eq!(*threshold, 0.5); // smallest value with target 1
            }
            other => panic!("expected numeric root split, found {other:?}"),
        }
        assert_eq!(tree.predict_row(&m, 0), 0.0);
        assert_eq!(tree.predict_row(&m, 99), 1.0);
    }

    #[test]
    fn first_split_matches_exhaustive_scan() {
        // oracle: brute-force evaluation of every candidate split by direct
        // partitioning, independent of the histogram path
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 200;
        let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let codes: Vec<u32> = (0..n).map(|_| rng.gen_range(0..5u32)).collect();
        let t: Vec<f64> = (0..n)
            .map(|i| x1[i].sin() + 0.8 * x2[i] + 0.3 * codes[i] as f64 + rng.gen_range(-0.2..0.2))
            .collect();
        let schema = FeatureSchema::new(vec![
            FeatureSpec::numeric("x1"),
            FeatureSpec::numeric("x2"),
            FeatureSpec::categorical("c", (0..5).map(|i| i.to_string()).collect()),
        ]);
        let m = FeatureMatrix::new(
            schema,
            vec![
                FeatureColumn::Numeric(x1.clone()),
                FeatureColumn::Numeric(x2.clone()),
                FeatureColumn::Categorical(codes.clone()),
            ],
        )
        .unwrap();
        let cfg = TreeFitConfig { max_leaves: 4, min_leaf_size: 5.0, ..Default::default() };
        let tree = fit_tree(&m, &t, &unit_weights(n), &cfg).unwrap();

        let sse_reduction = |is_left: &dyn Fn(usize) -> bool| -> Option<f64> {
            let (mut lw, mut ls, mut rw, mut rs) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                if is_left(i) {
                    lw += 1.0;
                    ls += t[i];
                } else {
                    rw += 1.0;
                    rs += t[i];
                }
            }
            if lw < 5.0 || rw < 5.0 {
                return None;
            }
            let s: f64 = ls + rs;
            Some(ls * ls / lw + rs * rs / rw - s * s / (lw + rw))
        };
        let mut best_gain = 0.0f64;
        for col in [&x1, &x2] {
            let mut vals: Vec<f64> = (*col).clone();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            for &thr in &vals[1..] {
                if let Some(g) = sse_reduction(&|i| col[i] < thr) {
                    best_gain = best_gain.max(g);
                }
            }
        }
        // categorical candidates: binary cuts of the mean-ordered levels
        let mut level_stats = vec![(0.0f64, 0.0f64); 5];
        for i in 0..n {
            level_stats[codes[i] as usize].0 += 1.0;
            level_stats[codes[i] as usize].1 += t[i];
        }
        let mut order: Vec<u32> = (0..5).collect();
        order.sort_by(|&a, &b| {
            let ma = level_stats[a as usize].1 / level_stats[a as usize].0;
            let mb = level_stats[b as usize].1 / level_stats[b as usize].0;
            ma.partial_cmp(&mb).unwrap()
        });
        for cut in 1..order.len() {
            let left: Vec<u32> = order[..cut].to_vec();
            if let Some(g) = sse_reduction(&|i| left.contains(&codes[i])) {
                best_gain = best_gain.max(g);
            }
        }

        match &tree.nodes()[0] {
            Node::Split { gain, .. } => {
                assert!(
                    (gain - best_gain).abs() <= 1e-9 * best_gain.max(1.0),
                    "tree first-split gain {gain} vs exhaustive {best_gain}"
                );
            }
            other => panic!("expected a root split, found {other:?}"),
        }
    }

    #[test]
    fn categorical_clusters_split_exactly() {
        let codes = vec![0u32, 0, 1, 1, 2, 2, 3, 3];
        let t = vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0];
        let schema = FeatureSchema::new(vec![FeatureSpec::categorical(
            "c",
            (0..4).map(|i| i.to_string()).collect(),
        )]);
        let m = FeatureMatrix::new(schema, vec![FeatureColumn::Categorical(codes)]).unwrap();
        let cfg = TreeFitConfig { max_leaves: 2, min_leaf_size: 1.0, ..Default::default() };
        let tree = fit_tree(&m, &t, &unit_weights(8), &cfg).unwrap();
        match &tree.nodes()[0] {
            Node::Split { rule: SplitRule::Categorical { left_levels, .. }, .. } => {
                assert_eq!(left_levels, &vec![0, 1]);
            }
            other => panic!("expected categorical split, found {other:?}"),
        }
        assert_eq!(tree.predict_row(&m, 0), 1.0);
        assert_eq!(tree.predict_row(&m, 7), 2.0);
    }

    #[test]
    fn unseen_level_routes_to_heavier_child() {
        // level 0 carries 2 rows, level 1 carries 4: the right child is heavier
        let codes = vec![0u32, 0, 1, 1, 1, 1];
        let t = vec![0.0, 0.0, 5.0, 5.0, 5.0, 5.0];
        let schema = FeatureSchema::new(vec![FeatureSpec::categorical(
            "c",
            (0..3).map(|i| i.to_string()).collect(),
        )]);
        let m =
            FeatureMatrix::new(schema.clone(), vec![FeatureColumn::Categorical(codes)]).unwrap();
        let cfg = TreeFitConfig { max_leaves: 2, min_leaf_size: 1.0, ..Default::default() };
        let tree = fit_tree(&m, &t, &unit_weights(6), &cfg).unwrap();
        let probe =
            FeatureMatrix::new(schema, vec![FeatureColumn::Categorical(vec![2u32])]).unwrap();
        // level 2 never seen at fit time: routes to the heavier (5.0) side
        assert_eq!(tree.predict_row(&probe, 0), 5.0);
    }

    #[test]
    fn min_leaf_weight_is_respected() {
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let t: Vec<f64> = xs.iter().map(|&x| if x < 1.0 { 100.0 } else { 0.0 }).collect();
        let m = numeric_matrix(vec![("x", xs)]);
        let cfg = TreeFitConfig { max_leaves: 8, min_leaf_size: 5.0, ..Default::default() };
        let tree = fit_tree(&m, &t, &unit_weights(20), &cfg).unwrap();
        for node in tree.nodes() {
            if let Node::Leaf { weight, .. } = node {
                assert!(*weight >= 5.0);
            }
        }
    }

    #[test]
    fn equal_gain_prefers_lower_column() {
        let x = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        let m = numeric_matrix(vec![("a", x.clone()), ("b", x.clone())]);
        let t: Vec<f64> = x.iter().map(|&v| v * 10.0).collect();
        let cfg = TreeFitConfig { max_leaves: 2, min_leaf_size: 1.0, ..Default::default() };
        let tree = fit_tree(&m, &t, &unit_weights(8), &cfg).unwrap();
        match &tree.nodes()[0] {
            Node::Split { rule, .. } => assert_eq!(rule.column(), 0),
            other => panic!("expected split, found {other:?}"),
        }
    }

    #[test]
    fn refit_and_serialization_are_bit_identical() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 300;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = xs.iter().map(|&x| x * x + rng.gen_range(-0.1..0.1)).collect();
        let m = numeric_matrix(vec![("x", xs)]);
        let cfg = TreeFitConfig { max_leaves: 16, min_leaf_size: 3.0, ..Default::default() };
        let a = fit_tree(&m, &t, &unit_weights(n), &cfg).unwrap();
        let b = fit_tree(&m, &t, &unit_weights(n), &cfg).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
        let back: RegressionTree = serde_json::from_str(&ja).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), ja);
        for r in 0..n {
            assert_eq!(a.predict_row(&m, r).to_bits(), back.predict_row(&m, r).to_bits());
        }
    }

    #[test]
    fn leaf_predictions_equal_routed_means() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 500;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let t: Vec<f64> =
            xs.iter().map(|&x| (x * 0.7).floor() + rng.gen_range(-0.3..0.3)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let m = numeric_matrix(vec![("x", xs)]);
        let cfg = TreeFitConfig { max_leaves: 12, min_leaf_size: 2.0, ..Default::default() };
        let tree = fit_tree(&m, &t, &w, &cfg).unwrap();
        let mut sums: std::collections::HashMap<usize, (f64, f64)> = Default::default();
        for r in 0..n {
            let leaf = tree.leaf_of(&m, r);
            let e = sums.entry(leaf).or_insert((0.0, 0.0));
            e.0 += w[r];
            e.1 += w[r] * t[r];
        }
        for (leaf, (sw, swy)) in sums {
            match tree.nodes()[leaf] {
                Node::Leaf { prediction, weight } => {
                    assert!((prediction - swy / sw).abs() < 1e-10);
                    assert!((weight - sw).abs() < 1e-9);
                }
                Node::Split { .. } => panic!("route ended on a split"),
            }
        }
    }

    #[test]
    fn empty_and_zero_weight_inputs_error() {
        let m = numeric_matrix(vec![("x", vec![])]);
        assert!(matches!(
            fit_tree(&m, &[], &[], &TreeFitConfig::default()),
            Err(TreeError::EmptyInput)
        ));
        let m = numeric_matrix(vec![("x", vec![1.0, 2.0])]);
        assert!(matches!(
            fit_tree(&m, &[1.0, 2.0], &[0.0, 0.0], &TreeFitConfig::default()),
            Err(TreeError::AllWeightsZero)
        ));
    }
}
