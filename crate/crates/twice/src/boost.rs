//! Gradient-boosted regression trees for squared loss.
//!
//! Each round fits a shallow tree to the current residuals and adds a
//! learning-rate-shrunk copy to the ensemble. With a validation set, training
//! stops once the validation MSE has not improved for `early_stop_patience`
//! rounds, and predictions are truncated at the best validation round, so
//! trees grown after it never influence output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FeatureMatrix, FeatureSchema};
use crate::tree::{
    check_schema_extends, fit_tree_body, Node, TreeBody, TreeError, TreeFitConfig,
};

#[derive(Debug, Error)]
pub enum BoostError {
    #[error("empty input")]
    EmptyInput,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Options controlling the boosting loop. Tree-shape options are forwarded
/// to the per-round tree fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostConfig {
    pub learning_rate: f64,
    pub max_rounds: usize,
    /// Rounds without validation improvement before stopping; 0 disables
    /// early stopping even when a validation set is present.
    pub early_stop_patience: usize,
    pub max_depth: usize,
    pub min_leaf_size: f64,
    pub max_leaves: usize,
    pub numeric_candidates: usize,
    /// Share of training groups carved off as a validation set by callers
    /// that construct one automatically; unused inside `fit_boosted` itself.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.08,
            max_rounds: 2000,
            early_stop_patience: 80,
            max_depth: 15,
            min_leaf_size: 30.0,
            max_leaves: 31,
            numeric_candidates: 255,
            validation_fraction: 0.10,
            seed: 0,
        }
    }
}

pub const BOOST_FORMAT_VERSION: u32 = 1;

/// A fitted boosted ensemble. Prediction is
/// `base + learning_rate * sum of the first `best_round` trees`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub format_version: u32,
    pub schema: FeatureSchema,
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<TreeBody>,
    /// Number of leading trees used for prediction.
    pub best_round: usize,
    /// Rounds grown before stopping (>= best_round).
    pub rounds_trained: usize,
    /// Training MSE after each round.
    pub train_curve: Vec<f64>,
    /// Validation MSE after each round, when a validation set was supplied.
    pub val_curve: Option<Vec<f64>>,
    /// Per-column split-gain totals over the first `best_round` trees, scaled
    /// so that their sum equals the realized training SSE reduction.
    pub feature_gains: Vec<f64>,
}

/// Fits a boosted ensemble to `targets`. When `validation` is given, early
/// stopping tracks its MSE and the model is truncated at the best round.
pub fn fit_boosted(
    features: &FeatureMatrix,
    targets: &[f64],
    validation: Option<(&FeatureMatrix, &[f64])>,
    config: &BoostConfig,
) -> Result<BoostedEnsemble, BoostError> {
    let n = features.n_rows();
    if n == 0 {
        return Err(BoostError::EmptyInput);
    }
    if targets.len() != n {
        return Err(BoostError::Tree(TreeError::SchemaMismatch(format!(
            "{} rows but {} targets",
            n,
            targets.len()
        ))));
    }
    if let Some((vm, vt)) = validation {
        if vm.n_rows() == 0 {
            return Err(BoostError::EmptyValidation);
        }
        if vt.len() != vm.n_rows() {
            return Err(BoostError::Tree(TreeError::SchemaMismatch(format!(
                "{} validation rows but {} validation targets",
                vm.n_rows(),
                vt.len()
            ))));
        }
        check_schema_extends(features.schema(), vm.schema())?;
    }

    let tree_cfg = TreeFitConfig {
        max_leaves: config.max_leaves,
        max_depth: config.max_depth,
        min_leaf_size: config.min_leaf_size,
        numeric_candidates: config.numeric_candidates,
        seed: config.seed,
    };
    let weights = vec![1.0f64; n];
    let base = targets.iter().sum::<f64>() / n as f64;
    let lr = config.learning_rate;

    let mut residual: Vec<f64> = targets.iter().map(|&t| t - base).collect();
    let mut val_pred: Vec<f64> = validation.map_or(Vec::new(), |(vm, _)| vec![base; vm.n_rows()]);

    let mut trees: Vec<TreeBody> = Vec::new();
    let mut train_curve: Vec<f64> = Vec::new();
    let mut val_curve: Vec<f64> = Vec::new();
    let mut best_round = 0usize;
    let mut best_val = f64::INFINITY;

    for round in 1..=config.max_rounds {
        let tree = fit_tree_body(features, &residual, &weights, &tree_cfg)?;
        if tree.n_leaves == 1 {
            // no admissible split: the tree would add (almost exactly) zero
            break;
        }
        for (r, res) in residual.iter_mut().enumerate() {
            *res -= lr * tree.predict_row(features, r);
        }
        train_curve.push(residual.iter().map(|r| r * r).sum::<f64>() / n as f64);

        if let Some((vm, vt)) = validation {
            for (r, p) in val_pred.iter_mut().enumerate() {
                *p += lr * tree.predict_row(vm, r);
            }
            let mse = val_pred
                .iter()
                .zip(vt)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / vt.len() as f64;
            val_curve.push(mse);
            trees.push(tree);
            if mse < best_val {
                best_val = mse;
                best_round = round;
            } else if config.early_stop_patience > 0
                && round - best_round >= config.early_stop_patience
            {
                break;
            }
        } else {
            trees.push(tree);
            best_round = round;
        }
    }

    let rounds_trained = trees.len();
    trees.truncate(best_round);
    train_curve.truncate(best_round.max(1).min(train_curve.len()));

    // A split's gain is the SSE drop of fitting leaf means at full strength;
    // adding the tree shrunk by eta realizes eta*(2 - eta) of that drop.
    let scale = lr * (2.0 - lr);
    let mut feature_gains = vec![0.0f64; features.n_cols()];
    for tree in &trees {
        for node in &tree.nodes {
            if let Node::Split { rule, gain, .. } = node {
                feature_gains[rule.column()] += gain * scale;
            }
        }
    }

    Ok(BoostedEnsemble {
        format_version: BOOST_FORMAT_VERSION,
        schema: features.schema().clone(),
        base,
        learning_rate: lr,
        trees,
        best_round,
        rounds_trained,
        train_curve,
        val_curve: validation.map(|_| val_curve),
        feature_gains,
    })
}

impl BoostedEnsemble {
    pub fn check_schema(&self, other: &FeatureSchema) -> Result<(), TreeError> {
        check_schema_extends(&self.schema, other)
    }

    /// Prediction for one row; only the first `best_round` trees contribute.
    pub fn predict_row(&self, features: &FeatureMatrix, row: usize) -> f64 {
        let mut acc = self.base;
        for tree in self.trees.iter().take(self.best_round) {
            acc += self.learning_rate * tree.predict_row(features, row);
        }
        acc
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, TreeError> {
        self.check_schema(features.schema())?;
        Ok((0..features.n_rows()).map(|r| self.predict_row(features, r)).collect())
    }

    /// Feature gains normalized to sum to one (all zeros when the ensemble
    /// never split, e.g. on constant targets).
    pub fn importance(&self) -> Vec<f64> {
        let total: f64 = self.feature_gains.iter().sum();
        if total <= 0.0 {
            return vec![0.0; self.feature_gains.len()];
        }
        self.feature_gains.iter().map(|g| g / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureColumn, FeatureSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn friedman_like(n: usize, seed: u64) -> (FeatureMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x3: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                10.0 * (std::f64::consts::PI * x1[i] * x2[i]).sin()
                    + 20.0 * (x3[i] - 0.5) * (x3[i] - 0.5)
                    + rng.gen_range(-0.5..0.5)
            })
            .collect();
        let schema = FeatureSchema::new(vec![
            FeatureSpec::numeric("x1"),
            FeatureSpec::numeric("x2"),
            FeatureSpec::numeric("x3"),
        ]);
        let m = FeatureMatrix::new(
            schema,
            vec![
                FeatureColumn::Numeric(x1),
                FeatureColumn::Numeric(x2),
                FeatureColumn::Numeric(x3),
            ],
        )
        .unwrap();
        (m, y)
    }

    fn small_config() -> BoostConfig {
        BoostConfig {
            max_rounds: 60,
            min_leaf_size: 5.0,
            max_leaves: 8,
            max_depth: 4,
            early_stop_patience: 20,
            ..Default::default()
        }
    }

    #[test]
    fn training_mse_decreases_monotonically() {
        let (m, y) = friedman_like(400, 1);
        let model = fit_boosted(&m, &y, None, &small_config()).unwrap();
        assert!(model.train_curve.len() > 5);
        for w in model.train_curve.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "training MSE rose: {} -> {}", w[0], w[1]);
        }
        let var = {
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64
        };
        assert!(*model.train_curve.last().unwrap() < 0.2 * var);
    }

    #[test]
    fn prediction_ignores_trees_after_best_round() {
        let (m, y) = friedman_like(300, 2);
        let (vm, vy) = friedman_like(120, 3);
        let mut model = fit_boosted(&m, &y, Some((&vm, &vy)), &small_config()).unwrap();
        let before: Vec<f64> = model.predict(&vm).unwrap();
        // graft junk trees past the active prefix; output must not move
        let junk = model.trees[0].clone();
        model.trees.push(junk.clone());
        model.trees.push(junk);
        let after: Vec<f64> = model.predict(&vm).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn early_stopping_truncates_at_validation_best() {
        let (m, y) = friedman_like(300, 4);
        let (vm, vy) = friedman_like(150, 5);
        let cfg = BoostConfig { early_stop_patience: 10, ..small_config() };
        let model = fit_boosted(&m, &y, Some((&vm, &vy)), &cfg).unwrap();
        let curve = model.val_curve.as_ref().unwrap();
        let argmin = curve
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i + 1)
            .unwrap();
        assert_eq!(model.best_round, argmin);
        assert_eq!(model.trees.len(), model.best_round);
        assert!(model.rounds_trained >= model.best_round);
    }

    #[test]
    fn feature_gains_sum_to_training_sse_reduction() {
        let (m, y) = friedman_like(500, 6);
        let cfg = BoostConfig { max_rounds: 40, early_stop_patience: 0, ..small_config() };
        let model = fit_boosted(&m, &y, None, &cfg).unwrap();
        let n = y.len() as f64;
        let sse0: f64 = y.iter().map(|v| (v - model.base) * (v - model.base)).sum();
        let sse_end = model.train_curve.last().unwrap() * n;
        let total_gain: f64 = model.feature_gains.iter().sum();
        let reduction = sse0 - sse_end;
        assert!(
            (total_gain - reduction).abs() <= 1e-6 * reduction.abs().max(1.0),
            "gain sum {total_gain} vs realized reduction {reduction}"
        );
        let imp = model.importance();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_target_yields_base_only_model() {
        let (m, _) = friedman_like(100, 7);
        let y = vec![2.5; 100];
        let model = fit_boosted(&m, &y, None, &small_config()).unwrap();
        assert_eq!(model.trees.len(), 0);
        assert_eq!(model.base, 2.5);
        assert_eq!(model.predict_row(&m, 3), 2.5);
        assert!(model.importance().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn refits_are_bit_identical() {
        let (m, y) = friedman_like(250, 8);
        let (vm, vy) = friedman_like(100, 9);
        let a = fit_boosted(&m, &y, Some((&vm, &vy)), &small_config()).unwrap();
        let b = fit_boosted(&m, &y, Some((&vm, &vy)), &small_config()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn serialization_round_trips() {
        let (m, y) = friedman_like(200, 10);
        let model = fit_boosted(&m, &y, None, &small_config()).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: BoostedEnsemble = serde_json::from_str(&json).unwrap();
        for r in 0..m.n_rows() {
            assert_eq!(model.predict_row(&m, r).to_bits(), back.predict_row(&m, r).to_bits());
        }
    }
}
