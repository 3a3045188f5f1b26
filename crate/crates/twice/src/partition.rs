//! Supervised partitions of firms and workers from observables.
//!
//! The firm partition is a regression tree over firm covariates plus
//! calendar year, fit on firm-year aggregates of a wage target (mean,
//! median, or residuals of a worker-only model), weighted by firm-year size.
//! The worker partition is a tree over worker covariates — never calendar
//! year — fit on one aggregate record per worker. Both trees are applied
//! per observation, so a worker or firm can change cell over time as its
//! covariates move across a learned threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boost::{fit_boosted, BoostConfig, BoostError};
use crate::data::{
    ColumnKind, FeatureColumn, FeatureMatrix, FeatureSchema, FeatureSpec, Side, Value,
};
use crate::panel::Panel;
use crate::tree::{fit_tree, RegressionTree, SplitRule, TreeError, TreeFitConfig};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("no rows to partition")]
    EmptyInput,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Boost(#[from] BoostError),
}

/// Firm-year wage target used to grow the firm tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FirmTarget {
    /// Mean log wage of the firm-year.
    Mean,
    /// Median log wage of the firm-year (robust to top earners).
    Median,
    /// Mean residual of a worker-only boosted model, cross-fitted over
    /// `blocks` worker blocks so no firm-year's target depends on a model
    /// that saw its own workers.
    Residual { blocks: usize, seed: u64, boost: BoostConfig },
}

/// Tree-shape options for partition fits. The leaf budget itself is the `k`
/// or `l` argument of the build functions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    /// Minimum total weight per cell: observations when `weight_by_size`,
    /// firm-years or workers otherwise.
    pub min_leaf_size: f64,
    pub max_depth: usize,
    pub numeric_candidates: usize,
    /// Weight firm-year records by their row counts.
    pub weight_by_size: bool,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { min_leaf_size: 30.0, max_depth: 64, numeric_candidates: 255, weight_by_size: true }
    }
}

impl PartitionConfig {
    fn tree_config(&self, max_leaves: usize) -> TreeFitConfig {
        TreeFitConfig {
            max_leaves,
            max_depth: self.max_depth,
            min_leaf_size: self.min_leaf_size,
            numeric_candidates: self.numeric_candidates,
            seed: 0,
        }
    }
}

fn median(sorted: &mut Vec<f64>) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite wages"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Aggregates one covariate over a group of rows: numeric mean, or the modal
/// categorical level with ties broken by the first-interned (lowest) code.
fn aggregate_column(panel: &Panel, col: usize, groups: &[Vec<u32>]) -> FeatureColumn {
    match panel.schema().columns[col].kind {
        ColumnKind::Numeric => FeatureColumn::Numeric(
            groups
                .iter()
                .map(|rows| {
                    let sum: f64 = rows
                        .iter()
                        .map(|&r| match panel.rows()[r as usize].values[col] {
                            Value::Numeric(x) => x,
                            Value::Categorical(_) => unreachable!("kind checked at build"),
                        })
                        .sum();
                    sum / rows.len() as f64
                })
                .collect(),
        ),
        ColumnKind::Categorical => {
            let card = panel.dictionary(col).len();
            FeatureColumn::Categorical(
                groups
                    .iter()
                    .map(|rows| {
                        let mut counts = vec![0usize; card];
                        for &r in rows {
                            match panel.rows()[r as usize].values[col] {
                                Value::Categorical(c) => counts[c as usize] += 1,
                                Value::Numeric(_) => unreachable!("kind checked at build"),
                            }
                        }
                        let mut best = 0u32;
                        for (c, &n) in counts.iter().enumerate() {
                            if n > counts[best as usize] {
                                best = c as u32;
                            }
                        }
                        best
                    })
                    .collect(),
            )
        }
    }
}

/// Grows the firm tree on firm-year aggregates of `rows`.
pub fn build_firm_partition(
    panel: &Panel,
    rows: &[usize],
    k: usize,
    target: &FirmTarget,
    config: &PartitionConfig,
) -> Result<RegressionTree, PartitionError> {
    if rows.is_empty() {
        return Err(PartitionError::EmptyInput);
    }
    // group by (firm, year); BTreeMap gives a deterministic record order
    let mut groups: BTreeMap<(u32, i32), Vec<u32>> = BTreeMap::new();
    for &r in rows {
        let obs = &panel.rows()[r];
        groups.entry((obs.firm.0, obs.year)).or_default().push(r as u32);
    }
    let keys: Vec<(u32, i32)> = groups.keys().cloned().collect();
    let row_groups: Vec<Vec<u32>> = keys.iter().map(|k| groups[k].clone()).collect();

    let row_residuals: Option<Vec<f64>> = match target {
        FirmTarget::Residual { blocks, seed, boost } => {
            Some(worker_model_residuals(panel, rows, *blocks, *seed, boost)?)
        }
        _ => None,
    };
    let row_index_of: Option<BTreeMap<u32, usize>> = row_residuals
        .as_ref()
        .map(|_| rows.iter().enumerate().map(|(i, &r)| (r as u32, i)).collect());

    let targets: Vec<f64> = row_groups
        .iter()
        .map(|g| match target {
            FirmTarget::Mean => {
                g.iter().map(|&r| panel.rows()[r as usize].log_wage).sum::<f64>() / g.len() as f64
            }
            FirmTarget::Median => {
                let mut values: Vec<f64> =
                    g.iter().map(|&r| panel.rows()[r as usize].log_wage).collect();
                median(&mut values)
            }
            FirmTarget::Residual { .. } => {
                let res = row_residuals.as_ref().expect("computed above");
                let idx = row_index_of.as_ref().expect("computed above");
                g.iter().map(|&r| res[idx[&r]]).sum::<f64>() / g.len() as f64
            }
        })
        .collect();
    let weights: Vec<f64> = if config.weight_by_size {
        row_groups.iter().map(|g| g.len() as f64).collect()
    } else {
        vec![1.0; row_groups.len()]
    };

    // aggregate firm covariates within firm-year, plus the year itself
    let cols = panel.side_columns(Side::Firm);
    let mut specs: Vec<FeatureSpec> = cols.iter().map(|&c| panel.feature_spec(c)).collect();
    specs.push(FeatureSpec::numeric("year"));
    let mut columns: Vec<FeatureColumn> =
        cols.iter().map(|&c| aggregate_column(panel, c, &row_groups)).collect();
    columns.push(FeatureColumn::Numeric(keys.iter().map(|&(_, y)| y as f64).collect()));
    let features = FeatureMatrix::new(FeatureSchema::new(specs), columns)
        .expect("aggregates are schema-consistent");

    Ok(fit_tree(&features, &targets, &weights, &config.tree_config(k))?)
}

/// Residuals of a worker-only wage model (worker covariates plus year),
/// cross-fitted over worker blocks: each row's prediction comes from a model
/// trained on other blocks' workers.
fn worker_model_residuals(
    panel: &Panel,
    rows: &[usize],
    blocks: usize,
    seed: u64,
    boost: &BoostConfig,
) -> Result<Vec<f64>, PartitionError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let blocks = blocks.max(2);
    let mut workers: Vec<u32> = {
        let mut seen: Vec<u32> = rows.iter().map(|&r| panel.rows()[r].worker.0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    };
    workers.sort_by(|&a, &b| {
        panel
            .worker_id(crate::panel::WorkerKey(a))
            .cmp(panel.worker_id(crate::panel::WorkerKey(b)))
    });
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    workers.shuffle(&mut rng);
    let mut block_of: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, &w) in workers.iter().enumerate() {
        block_of.insert(w, i % blocks);
    }

    let features = panel.worker_matrix_with_year(rows);
    let targets: Vec<f64> = rows.iter().map(|&r| panel.rows()[r].log_wage).collect();
    let mut residuals = vec![0.0f64; rows.len()];
    for a in 0..blocks {
        let test: Vec<usize> = (0..rows.len())
            .filter(|&i| block_of[&panel.rows()[rows[i]].worker.0] == a)
            .collect();
        if test.is_empty() {
            continue;
        }
        let train: Vec<usize> = (0..rows.len())
            .filter(|&i| block_of[&panel.rows()[rows[i]].worker.0] != a)
            .collect();
        if train.is_empty() {
            return Err(PartitionError::EmptyInput);
        }
        let tm = features.select_rows(&train);
        let tt: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
        let model = fit_boosted(&tm, &tt, None, boost)?;
        let vm = features.select_rows(&test);
        for (j, &i) in test.iter().enumerate() {
            residuals[i] = targets[i] - model.predict_row(&vm, j);
        }
    }
    Ok(residuals)
}

/// Grows the worker tree on one aggregate record per worker: mean log wage
/// as target, mean numeric and modal categorical covariates as features,
/// one unit of weight per worker, and no calendar year column.
pub fn build_worker_partition(
    panel: &Panel,
    rows: &[usize],
    l: usize,
    config: &PartitionConfig,
) -> Result<RegressionTree, PartitionError> {
    if rows.is_empty() {
        return Err(PartitionError::EmptyInput);
    }
    let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &r in rows {
        groups.entry(panel.rows()[r].worker.0).or_default().push(r as u32);
    }
    let row_groups: Vec<Vec<u32>> = groups.values().cloned().collect();
    let targets: Vec<f64> = row_groups
        .iter()
        .map(|g| g.iter().map(|&r| panel.rows()[r as usize].log_wage).sum::<f64>() / g.len() as f64)
        .collect();
    let weights = vec![1.0f64; row_groups.len()];

    let cols = panel.side_columns(Side::Worker);
    let specs: Vec<FeatureSpec> = cols.iter().map(|&c| panel.feature_spec(c)).collect();
    let columns: Vec<FeatureColumn> =
        cols.iter().map(|&c| aggregate_column(panel, c, &row_groups)).collect();
    let features = FeatureMatrix::new(FeatureSchema::new(specs), columns)
        .expect("aggregates are schema-consistent");

    Ok(fit_tree(&features, &targets, &weights, &config.tree_config(l))?)
}

pub const PARTITION_FORMAT_VERSION: u32 = 1;

/// Fitted worker and firm partitions with dense 1-based cell ids assigned to
/// leaves in left-to-right tree order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPair {
    pub format_version: u32,
    pub firm_tree: RegressionTree,
    pub worker_tree: RegressionTree,
    /// Realized firm cell count (= firm tree leaves).
    pub k: usize,
    /// Realized worker cell count.
    pub l: usize,
    /// Leaf node index -> dense firm cell id (1..=k).
    pub firm_cell_of_leaf: BTreeMap<usize, u32>,
    /// Leaf node index -> dense worker cell id (1..=l).
    pub worker_cell_of_leaf: BTreeMap<usize, u32>,
}

impl PartitionPair {
    pub fn new(firm_tree: RegressionTree, worker_tree: RegressionTree) -> Self {
        let number = |tree: &RegressionTree| -> BTreeMap<usize, u32> {
            tree.leaves_left_to_right()
                .into_iter()
                .enumerate()
                .map(|(i, leaf)| (leaf, i as u32 + 1))
                .collect()
        };
        let firm_cell_of_leaf = number(&firm_tree);
        let worker_cell_of_leaf = number(&worker_tree);
        Self {
            format_version: PARTITION_FORMAT_VERSION,
            k: firm_cell_of_leaf.len(),
            l: worker_cell_of_leaf.len(),
            firm_tree,
            worker_tree,
            firm_cell_of_leaf,
            worker_cell_of_leaf,
        }
    }
}

/// Per-observation cell assignment: `(worker_cell, firm_cell)` per row, both
/// 1-based. Worker cells are computed from the row's current worker
/// covariates (year never enters); firm cells from the row's firm covariates
/// and year.
pub fn assign_cells(
    panel: &Panel,
    rows: &[usize],
    pair: &PartitionPair,
) -> Result<Vec<(u32, u32)>, PartitionError> {
    let wm = panel.worker_matrix(rows);
    let fm = panel.firm_matrix(rows);
    pair.worker_tree.check_schema(wm.schema())?;
    pair.firm_tree.check_schema(fm.schema())?;
    Ok((0..rows.len())
        .map(|i| {
            let wl = pair.worker_tree.leaf_of(&wm, i);
            let fl = pair.firm_tree.leaf_of(&fm, i);
            (pair.worker_cell_of_leaf[&wl], pair.firm_cell_of_leaf[&fl])
        })
        .collect())
}

/// One cell's routing rule, population and mean target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRule {
    pub cell: u32,
    /// Rendered conjunction, one condition per split on the root-to-leaf path.
    pub conditions: Vec<String>,
    /// Structured path: `(rule, went_left)` per split.
    pub path: Vec<(SplitRule, bool)>,
    pub weight: f64,
    pub mean_target: f64,
}

fn render_condition(rule: &SplitRule, went_left: bool, schema: &FeatureSchema) -> String {
    match rule {
        SplitRule::Numeric { column, threshold } => {
            let name = &schema.features[*column].name;
            if went_left {
                format!("{name} < {threshold}")
            } else {
                format!("{name} >= {threshold}")
            }
        }
        SplitRule::Categorical { column, left_levels, right_levels } => {
            let spec = &schema.features[*column];
            let levels = if went_left { left_levels } else { right_levels };
            let names: Vec<&str> = levels
                .iter()
                .map(|&c| match &spec.kind {
                    crate::data::FeatureKind::Categorical { levels } => levels[c as usize].as_str(),
                    crate::data::FeatureKind::Numeric => unreachable!("categorical split"),
                })
                .collect();
            format!("{} in {{{}}}", spec.name, names.join(", "))
        }
    }
}

fn describe_tree(tree: &RegressionTree, cells: &BTreeMap<usize, u32>) -> Vec<CellRule> {
    let mut out: Vec<CellRule> = tree
        .leaves_left_to_right()
        .into_iter()
        .map(|leaf| {
            let path = tree.body.path_to(leaf);
            let conditions =
                path.iter().map(|(r, wl)| render_condition(r, *wl, &tree.schema)).collect();
            let (weight, mean_target) = match tree.nodes()[leaf] {
                crate::tree::Node::Leaf { prediction, weight } => (weight, prediction),
                crate::tree::Node::Split { .. } => unreachable!("leaves only"),
            };
            CellRule { cell: cells[&leaf], conditions, path, weight, mean_target }
        })
        .collect();
    out.sort_by_key(|r| r.cell);
    out
}

/// Human-readable rules for every worker and firm cell.
pub fn describe_cells(pair: &PartitionPair) -> (Vec<CellRule>, Vec<CellRule>) {
    (
        describe_tree(&pair.worker_tree, &pair.worker_cell_of_leaf),
        describe_tree(&pair.firm_tree, &pair.firm_cell_of_leaf),
    )
}
