//! Learner abstraction and registry.
//!
//! A [`Learner`] turns a training set into a [`Fitted`] model; both are used
//! as trait objects so that cross-fitting, tuning and the CLI can swap
//! prediction strategies without caring which one is active. The built-in
//! strategies are `constant`, `ols`, `tree` and `boosted`; external callers
//! can register their own under any name.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boost::{fit_boosted, BoostConfig, BoostError, BoostedEnsemble};
use crate::data::{FeatureColumn, FeatureMatrix, FeatureSchema};
use crate::tree::{fit_tree, RegressionTree, TreeError, TreeFitConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty training set")]
    EmptyInput,
    #[error("{0} rows but {1} targets")]
    LengthMismatch(usize, usize),
    #[error("no learner registered under `{0}`")]
    UnknownLearner(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Boost(#[from] BoostError),
}

/// Training inputs handed to a learner.
pub struct TrainSet<'a> {
    pub features: &'a FeatureMatrix,
    pub targets: &'a [f64],
    /// Optional per-row grouping keys; carved-off validation sets keep whole
    /// groups together so early stopping is not informed by training rows'
    /// neighbors.
    pub groups: Option<&'a [u32]>,
    /// Explicit validation set; learners that want one and do not get one
    /// carve it from the training rows.
    pub validation: Option<(&'a FeatureMatrix, &'a [f64])>,
}

impl<'a> TrainSet<'a> {
    pub fn new(features: &'a FeatureMatrix, targets: &'a [f64]) -> Self {
        Self { features, targets, groups: None, validation: None }
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.features.n_rows() == 0 {
            return Err(ModelError::EmptyInput);
        }
        if self.targets.len() != self.features.n_rows() {
            return Err(ModelError::LengthMismatch(self.features.n_rows(), self.targets.len()));
        }
        Ok(())
    }
}

/// A fitted prediction strategy.
pub trait Fitted: Send + Sync {
    fn schema(&self) -> &FeatureSchema;
    /// Prediction for one row; assumes the matrix was schema-checked.
    fn predict_row(&self, features: &FeatureMatrix, row: usize) -> f64;
    /// Checked prediction over a whole matrix.
    fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, ModelError>;
    /// Predictions for a subset of rows.
    fn predict_rows(&self, features: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.predict_row(features, r)).collect()
    }
    /// Serialized form, for strategies that support persistence.
    fn to_json(&self) -> Option<serde_json::Value> {
        None
    }
}

/// A trainable prediction strategy.
pub trait Learner: Send + Sync {
    fn name(&self) -> &str;
    fn fit(&self, train: &TrainSet) -> Result<Box<dyn Fitted>, ModelError>;
}

/// Name-keyed registry of learners. Registering under an existing name
/// replaces the previous entry, so callers can override the built-in
/// defaults with configured variants.
pub struct LearnerRegistry {
    entries: BTreeMap<String, Box<dyn Learner>>,
}

impl LearnerRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Registry with the four built-in strategies under default settings.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(ConstantLearner));
        reg.register(Box::new(OlsLearner::new(1)));
        reg.register(Box::new(TreeLearner::new(TreeFitConfig::default())));
        reg.register(Box::new(BoostedLearner::new(BoostConfig::default())));
        reg
    }

    pub fn register(&mut self, learner: Box<dyn Learner>) {
        self.entries.insert(learner.name().to_string(), learner);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Learner, ModelError> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| ModelError::UnknownLearner(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(|s| s.as_str()).collect()
    }
}

// ---------------------------------------------------------------------------
// constant

pub struct ConstantLearner;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantModel {
    pub schema: FeatureSchema,
    pub value: f64,
}

impl Learner for ConstantLearner {
    fn name(&self) -> &str {
        "constant"
    }

    fn fit(&self, train: &TrainSet) -> Result<Box<dyn Fitted>, ModelError> {
        train.check()?;
        let value = train.targets.iter().sum::<f64>() / train.targets.len() as f64;
        Ok(Box::new(ConstantModel { schema: train.features.schema().clone(), value }))
    }
}

impl Fitted for ConstantModel {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_row(&self, _features: &FeatureMatrix, _row: usize) -> f64 {
        self.value
    }

    fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, ModelError> {
        Ok(vec![self.value; features.n_rows()])
    }

    fn to_json(&self) -> Option<serde_json::Value> {
        serde_json::to_value(self).ok()
    }
}

// ---------------------------------------------------------------------------
// linear models

/// One column of a linear design matrix, self-describing so that fitted
/// models can evaluate it on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "term")]
pub enum Term {
    Intercept,
    /// `((x - mean) / scale)^degree`; zero when `scale` is zero (a column
    /// that was constant in training contributes nothing).
    Power { column: usize, degree: u32, mean: f64, scale: f64 },
    /// Indicator of a categorical level.
    Dummy { column: usize, level: u32 },
    /// Indicator of exact numeric equality (integer-valued columns such as
    /// calendar years).
    NumericEquals { column: usize, value: f64 },
}

impl Term {
    fn evaluate(&self, features: &FeatureMatrix, row: usize) -> f64 {
        use crate::data::Value;
        match self {
            Term::Intercept => 1.0,
            Term::Power { column, degree, mean, scale } => {
                let x = match features.value(row, *column) {
                    Value::Numeric(v) => v,
                    Value::Categorical(c) => c as f64,
                };
                if *scale > 0.0 {
                    ((x - mean) / scale).powi(*degree as i32)
                } else {
                    0.0
                }
            }
            Term::Dummy { column, level } => match features.value(row, *column) {
                Value::Categorical(c) if c == *level => 1.0,
                _ => 0.0,
            },
            Term::NumericEquals { column, value } => match features.value(row, *column) {
                Value::Numeric(v) if v == *value => 1.0,
                _ => 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub schema: FeatureSchema,
    pub terms: Vec<Term>,
    pub coef: Vec<f64>,
}

/// Least-squares fit of `terms` to `targets`, via the normal equations and a
/// spectral pseudo-inverse: rank-deficient designs (an absent dummy level, a
/// constant column) get the minimum-norm solution instead of an error.
pub fn fit_linear(
    features: &FeatureMatrix,
    targets: &[f64],
    terms: Vec<Term>,
) -> Result<LinearModel, ModelError> {
    let n = features.n_rows();
    if n == 0 {
        return Err(ModelError::EmptyInput);
    }
    if targets.len() != n {
        return Err(ModelError::LengthMismatch(n, targets.len()));
    }
    let p = terms.len();
    let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut cross = nalgebra::DVector::<f64>::zeros(p);
    let mut buf = vec![0.0f64; p];
    for row in 0..n {
        for (j, t) in terms.iter().enumerate() {
            buf[j] = t.evaluate(features, row);
        }
        for i in 0..p {
            if buf[i] == 0.0 {
                continue;
            }
            for j in i..p {
                gram[(i, j)] += buf[i] * buf[j];
            }
            cross[i] += buf[i] * targets[row];
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    let eig = gram.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_ev * 1e-12;
    let mut coef = nalgebra::DVector::<f64>::zeros(p);
    for k in 0..p {
        let ev = eig.eigenvalues[k];
        if ev > tol {
            let uk = eig.eigenvectors.column(k);
            let proj = uk.dot(&cross) / ev;
            coef.axpy(proj, &uk, 1.0);
        }
    }
    Ok(LinearModel { schema: features.schema().clone(), terms, coef: coef.iter().cloned().collect() })
}

impl Fitted for LinearModel {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_row(&self, features: &FeatureMatrix, row: usize) -> f64 {
        self.terms
            .iter()
            .zip(&self.coef)
            .map(|(t, c)| c * t.evaluate(features, row))
            .sum()
    }

    fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, ModelError> {
        crate::tree::check_schema_extends(&self.schema, features.schema())?;
        Ok((0..features.n_rows()).map(|r| self.predict_row(features, r)).collect())
    }

    fn to_json(&self) -> Option<serde_json::Value> {
        serde_json::to_value(self).ok()
    }
}

/// Polynomial regression on every numeric column plus drop-first one-hot
/// dummies for every categorical column.
pub struct OlsLearner {
    degree: u32,
}

impl OlsLearner {
    pub fn new(degree: u32) -> Self {
        Self { degree: degree.max(1) }
    }
}

/// Standardization constants of one numeric column over the training rows.
fn column_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Design terms for [`OlsLearner`]'s layout on a given training matrix.
pub fn polynomial_terms(features: &FeatureMatrix, degree: u32) -> Vec<Term> {
    let mut terms = vec![Term::Intercept];
    for (c, spec) in features.schema().features.iter().enumerate() {
        match features.column(c) {
            FeatureColumn::Numeric(values) => {
                let (mean, scale) = column_moments(values);
                for d in 1..=degree {
                    terms.push(Term::Power { column: c, degree: d, mean, scale });
                }
            }
            FeatureColumn::Categorical(_) => {
                for level in 1..spec.cardinality() {
                    terms.push(Term::Dummy { column: c, level });
                }
            }
        }
    }
    terms
}

impl Learner for OlsLearner {
    fn name(&self) -> &str {
        "ols"
    }

    fn fit(&self, train: &TrainSet) -> Result<Box<dyn Fitted>, ModelError> {
        train.check()?;
        let terms = polynomial_terms(train.features, self.degree);
        Ok(Box::new(fit_linear(train.features, train.targets, terms)?))
    }
}

// ---------------------------------------------------------------------------
// tree / boosted

pub struct TreeLearner {
    config: TreeFitConfig,
}

impl TreeLearner {
    pub fn new(config: TreeFitConfig) -> Self {
        Self { config }
    }
}

impl Learner for TreeLearner {
    fn name(&self) -> &str {
        "tree"
    }

    fn fit(&self, train: &TrainSet) -> Result<Box<dyn Fitted>, ModelError> {
        train.check()?;
        let weights = vec![1.0; train.features.n_rows()];
        let tree = fit_tree(train.features, train.targets, &weights, &self.config)?;
        Ok(Box::new(tree))
    }
}

impl Fitted for RegressionTree {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_row(&self, features: &FeatureMatrix, row: usize) -> f64 {
        RegressionTree::predict_row(self, features, row)
    }

    fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, ModelError> {
        Ok(RegressionTree::predict(self, features)?)
    }

    fn to_json(&self) -> Option<serde_json::Value> {
        serde_json::to_value(self).ok()
    }
}

pub struct BoostedLearner {
    config: BoostConfig,
}

impl BoostedLearner {
    pub fn new(config: BoostConfig) -> Self {
        Self { config }
    }

    /// Group-respecting validation carve: whole groups are moved so no group
    /// straddles the train/validation boundary.
    fn carve_validation(
        &self,
        train: &TrainSet,
    ) -> Option<(Vec<usize>, Vec<usize>)> {
        let n = train.features.n_rows();
        let fraction = self.config.validation_fraction;
        if fraction <= 0.0 || self.config.early_stop_patience == 0 {
            return None;
        }
        let owned_groups: Vec<u32>;
        let groups: &[u32] = match train.groups {
            Some(g) => g,
            None => {
                owned_groups = (0..n as u32).collect();
                &owned_groups
            }
        };
        let mut keys: Vec<u32> = groups.to_vec();
        keys.sort_unstable();
        keys.dedup();
        if keys.len() < 2 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        keys.shuffle(&mut rng);
        let n_val = ((keys.len() as f64 * fraction).round() as usize).clamp(1, keys.len() - 1);
        let chosen: std::collections::HashSet<u32> = keys[..n_val].iter().cloned().collect();
        let mut train_rows = Vec::with_capacity(n);
        let mut val_rows = Vec::new();
        for (r, g) in groups.iter().enumerate() {
            if chosen.contains(g) {
                val_rows.push(r);
            } else {
                train_rows.push(r);
            }
        }
        if train_rows.is_empty() || val_rows.is_empty() {
            return None;
        }
        Some((train_rows, val_rows))
    }
}

impl Learner for BoostedLearner {
    fn name(&self) -> &str {
        "boosted"
    }

    fn fit(&self, train: &TrainSet) -> Result<Box<dyn Fitted>, ModelError> {
        train.check()?;
        let model = if let Some((vm, vt)) = train.validation {
            fit_boosted(train.features, train.targets, Some((vm, vt)), &self.config)?
        } else if let Some((train_rows, val_rows)) = self.carve_validation(train) {
            let tm = train.features.select_rows(&train_rows);
            let tt: Vec<f64> = train_rows.iter().map(|&r| train.targets[r]).collect();
            let vm = train.features.select_rows(&val_rows);
            let vt: Vec<f64> = val_rows.iter().map(|&r| train.targets[r]).collect();
            fit_boosted(&tm, &tt, Some((&vm, &vt)), &self.config)?
        } else {
            fit_boosted(train.features, train.targets, None, &self.config)?
        };
        Ok(Box::new(model))
    }
}

impl Fitted for BoostedEnsemble {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_row(&self, features: &FeatureMatrix, row: usize) -> f64 {
        BoostedEnsemble::predict_row(self, features, row)
    }

    fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, ModelError> {
        Ok(BoostedEnsemble::predict(self, features)?)
    }

    fn to_json(&self) -> Option<serde_json::Value> {
        serde_json::to_value(self).ok()
    }
}

// ---------------------------------------------------------------------------

/// Squared Pearson correlation between predictions and outcomes; zero when
/// either side is constant.
pub fn r_squared(predictions: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(predictions.len(), actual.len());
    let n = predictions.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mp = predictions.iter().sum::<f64>() / n;
    let ma = actual.iter().sum::<f64>() / n;
    let (mut spp, mut saa, mut spa) = (0.0, 0.0, 0.0);
    for (p, a) in predictions.iter().zip(actual) {
        let (dp, da) = (p - mp, a - ma);
        spp += dp * dp;
        saa += da * da;
        spa += dp * da;
    }
    if spp <= 0.0 || saa <= 0.0 {
        return 0.0;
    }
    (spa * spa) / (spp * saa)
}
