//! Prediction-surface summaries: partial dependence and accumulated local
//! effects.
//!
//! Both tools probe any [`Fitted`] predictor over the empirical covariate
//! distribution held in a [`FeatureMatrix`]. Partial dependence substitutes
//! each grid value into every row's focal coordinate and averages the
//! predictions; accumulated local effects average finite differences across
//! quantile bins and integrate them, which keeps the curve on the data's
//! support when covariates are correlated. Multiple models (for example the
//! cross-fitted fold-cell set) are averaged pointwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FeatureColumn, FeatureKind, FeatureMatrix};
use crate::model::{Fitted, ModelError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("no models or no rows to evaluate")]
    EmptyInput,
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("column `{column}` has no level `{level}`")]
    UnknownLevel { column: String, level: String },
    #[error("feature `{0}` is not numeric")]
    NotNumeric(String),
    #[error("pinned value for `{0}` does not match the column type")]
    PinMismatch(String),
    #[error("trim quantiles ({lower}, {upper}) must satisfy 0 <= lower < upper <= 1")]
    BadTrim { lower: f64, upper: f64 },
    #[error("grid needs at least two points, got {0}")]
    BadGrid(usize),
    #[error("grid collapsed to fewer than two distinct points after trimming")]
    EmptyGrid,
    #[error("feature `{0}` has too few distinct values in the trim range")]
    DegenerateSupport(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A value pinned onto a column: a number for numeric columns, a level name
/// for categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PinValue {
    Numeric(f64),
    Level(String),
}

/// Which partial-dependence flavor to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveVariant {
    /// Average over rows with all non-focal covariates at observed values.
    PdpFull,
    /// Evaluate at a common baseline: every non-focal column outside
    /// `subgroup_columns` is fixed at its median (numeric) or modal
    /// (categorical) value before averaging, so only the focal feature and
    /// the subgroup columns vary.
    PdpReference { subgroup_columns: Vec<String> },
    /// Full average, but with the listed columns pinned at fixed values
    /// first (for example productivity held at its sample median).
    PdpConditional { pinned: Vec<(String, PinValue)> },
}

impl CurveVariant {
    fn label(&self) -> &'static str {
        match self {
            CurveVariant::PdpFull => "pdp_full",
            CurveVariant::PdpReference { .. } => "pdp_reference",
            CurveVariant::PdpConditional { .. } => "pdp_conditional",
        }
    }
}

/// Recipe for one curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSpec {
    pub feature: String,
    /// Number of quantile grid points (PDP) or bins (ALE).
    pub grid_points: usize,
    /// Quantile window the grid is built on.
    pub trim: (f64, f64),
    pub variant: CurveVariant,
    /// Overrides the quantile grid: grid values for PDP, ascending bin edges
    /// for ALE. Numeric focal features only.
    pub explicit_grid: Option<Vec<f64>>,
    /// Presentation hint copied into the curve (e.g. `log` for tenure).
    pub axis_hint: Option<String>,
}

impl CurveSpec {
    pub fn full(feature: &str) -> Self {
        Self {
            feature: feature.to_string(),
            grid_points: 40,
            trim: (0.10, 0.90),
            variant: CurveVariant::PdpFull,
            explicit_grid: None,
            axis_hint: None,
        }
    }

    pub fn reference(feature: &str, subgroup_columns: Vec<String>) -> Self {
        Self { variant: CurveVariant::PdpReference { subgroup_columns }, ..Self::full(feature) }
    }

    pub fn conditional(feature: &str, pinned: Vec<(String, PinValue)>) -> Self {
        Self { variant: CurveVariant::PdpConditional { pinned }, ..Self::full(feature) }
    }

    fn validate(&self) -> Result<(), ExplainError> {
        let (lo, hi) = self.trim;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(ExplainError::BadTrim { lower: lo, upper: hi });
        }
        if self.grid_points < 2 {
            return Err(ExplainError::BadGrid(self.grid_points));
        }
        if let Some(grid) = &self.explicit_grid {
            if grid.len() < 2 {
                return Err(ExplainError::BadGrid(grid.len()));
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|g| !g.is_finite()) {
                return Err(ExplainError::BadGrid(grid.len()));
            }
        }
        Ok(())
    }
}

/// An evaluated curve. `support` counts the observations backing each point
/// (nearest-grid-point tally for PDP, bin occupancy for ALE) so plots can
/// gray out thin regions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Curve {
    pub feature: String,
    pub variant: String,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub support: Vec<u64>,
    pub axis_hint: Option<String>,
}

/// Lower empirical quantile `s[⌈p·n⌉ − 1]`. Every grid point is an observed
/// value, and the map is invariant to duplicating the whole sample — which
/// makes curves invariant to panel duplication.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let idx = (p * sorted.len() as f64).ceil() as usize;
    sorted[idx.clamp(1, sorted.len()) - 1]
}

fn sorted_focal(values: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite feature values"));
    s
}

fn focal_numeric<'m>(
    features: &'m FeatureMatrix,
    name: &str,
) -> Result<(usize, &'m [f64]), ExplainError> {
    let (idx, col) = features
        .column_by_name(name)
        .map_err(|_| ExplainError::UnknownFeature(name.to_string()))?;
    match col {
        FeatureColumn::Numeric(v) => Ok((idx, v)),
        FeatureColumn::Categorical(_) => Err(ExplainError::NotNumeric(name.to_string())),
    }
}

fn apply_variant(
    features: &FeatureMatrix,
    focal: usize,
    variant: &CurveVariant,
) -> Result<FeatureMatrix, ExplainError> {
    let mut base = features.clone();
    match variant {
        CurveVariant::PdpFull => {}
        CurveVariant::PdpReference { subgroup_columns } => {
            for col in 0..features.n_cols() {
                let name = &features.schema().features[col].name;
                if col == focal || subgroup_columns.contains(name) {
                    continue;
                }
                match features.column(col) {
                    FeatureColumn::Numeric(v) => base.fill_numeric(col, median(v)),
                    FeatureColumn::Categorical(codes) => {
                        let m = mode(codes);
                        base.set_column(
                            col,
                            FeatureColumn::Categorical(vec![m; features.n_rows()]),
                        )?;
                    }
                }
            }
        }
        CurveVariant::PdpConditional { pinned } => {
            for (name, pin) in pinned {
                let (col, column) = features
                    .column_by_name(name)
                    .map_err(|_| ExplainError::UnknownFeature(name.clone()))?;
                match (column, pin) {
                    (FeatureColumn::Numeric(_), PinValue::Numeric(v)) => {
                        base.fill_numeric(col, *v)
                    }
                    (FeatureColumn::Categorical(_), PinValue::Level(level)) => {
                        let code = match &features.schema().features[col].kind {
                            FeatureKind::Categorical { levels } => levels
                                .iter()
                                .position(|l| l == level)
                                .ok_or_else(|| ExplainError::UnknownLevel {
                                    column: name.clone(),
                                    level: level.clone(),
                                })?,
                            FeatureKind::Numeric => unreachable!("column is categorical"),
                        };
                        base.set_column(
                            col,
                            FeatureColumn::Categorical(vec![code as u32; features.n_rows()]),
                        )?;
                    }
                    _ => return Err(ExplainError::PinMismatch(name.clone())),
                }
            }
        }
    }
    Ok(base)
}

fn median(values: &[f64]) -> f64 {
    let s = sorted_focal(values);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Most frequent code, smallest code on ties.
fn mode(codes: &[u32]) -> u32 {
    let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for &c in codes {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&c, _)| c)
        .expect("nonempty column")
}

/// Mean prediction over all rows, averaged across models.
fn mean_prediction(
    models: &[&dyn Fitted],
    features: &FeatureMatrix,
) -> Result<f64, ExplainError> {
    let mut acc = 0.0;
    for model in models {
        let preds = model.predict(features)?;
        acc += preds.iter().sum::<f64>() / preds.len() as f64;
    }
    Ok(acc / models.len() as f64)
}

/// Observations tallied to their nearest grid point (ties toward the lower
/// point); values outside the grid's span are not counted.
fn grid_support(grid: &[f64], values: &[f64]) -> Vec<u64> {
    let mut support = vec![0u64; grid.len()];
    for &v in values {
        if v < grid[0] || v > grid[grid.len() - 1] {
            continue;
        }
        let mut best = 0usize;
        for (i, &g) in grid.iter().enumerate() {
            if (v - g).abs() < (v - grid[best]).abs() {
                best = i;
            }
        }
        support[best] += 1;
    }
    support
}

/// Partial dependence of the model-average prediction on one feature.
///
/// Numeric focal features are evaluated on a quantile grid inside the trim
/// window; categorical ones enumerate their levels. Each grid value is
/// written into every row's focal coordinate, predictions are averaged over
/// rows, then over models.
pub fn pdp(
    models: &[&dyn Fitted],
    features: &FeatureMatrix,
    spec: &CurveSpec,
) -> Result<Curve, ExplainError> {
    spec.validate()?;
    if models.is_empty() || features.n_rows() == 0 {
        return Err(ExplainError::EmptyInput);
    }
    let (focal, col) = features
        .column_by_name(&spec.feature)
        .map_err(|_| ExplainError::UnknownFeature(spec.feature.clone()))?;

    // categorical focal features enumerate levels instead of a grid
    if let FeatureColumn::Categorical(codes) = col {
        let card = features.schema().features[focal].cardinality();
        if card < 2 {
            return Err(ExplainError::EmptyGrid);
        }
        let base = apply_variant(features, focal, &spec.variant)?;
        let mut values = Vec::with_capacity(card as usize);
        let mut support = vec![0u64; card as usize];
        for &c in codes {
            support[c as usize] += 1;
        }
        for level in 0..card {
            let mut scratch = base.clone();
            scratch.set_column(
                focal,
                FeatureColumn::Categorical(vec![level; features.n_rows()]),
            )?;
            values.push(mean_prediction(models, &scratch)?);
        }
        return Ok(Curve {
            feature: spec.feature.clone(),
            variant: spec.variant.label().to_string(),
            grid: (0..card).map(f64::from).collect(),
            values,
            support,
            axis_hint: spec.axis_hint.clone(),
        });
    }

    let (_, focal_values) = focal_numeric(features, &spec.feature)?;
    let grid: Vec<f64> = match &spec.explicit_grid {
        Some(g) => g.clone(),
        None => {
            let sorted = sorted_focal(focal_values);
            let (lo, hi) = spec.trim;
            let g = spec.grid_points;
            let mut grid: Vec<f64> = (0..g)
                .map(|i| quantile(&sorted, lo + (hi - lo) * i as f64 / (g - 1) as f64))
                .collect();
            grid.dedup();
            grid
        }
    };
    if grid.len() < 2 {
        return Err(ExplainError::EmptyGrid);
    }
    let support = grid_support(&grid, focal_values);
    let base = apply_variant(features, focal, &spec.variant)?;
    let mut values = Vec::with_capacity(grid.len());
    let mut scratch = base.clone();
    for &s in &grid {
        scratch.fill_numeric(focal, s);
        values.push(mean_prediction(models, &scratch)?);
    }
    Ok(Curve {
        feature: spec.feature.clone(),
        variant: spec.variant.label().to_string(),
        grid,
        values,
        support,
        axis_hint: spec.axis_hint.clone(),
    })
}

/// First-order accumulated local effects of one numeric feature.
///
/// The trim window is cut into `grid_points` quantile bins; rows in each bin
/// are evaluated at the bin's two edges, the finite differences are
/// averaged (over rows, then models), accumulated across bins, and the
/// running curve is centered to weighted mean zero with bin counts as
/// weights. Points sit at upper bin edges. Mass points collapse duplicate
/// quantile edges, and any bin left without rows is merged into the next
/// one, so every reported point has support. The `variant` field of the
/// spec is ignored: ALE has a single flavor.
pub fn ale(
    models: &[&dyn Fitted],
    features: &FeatureMatrix,
    spec: &CurveSpec,
) -> Result<Curve, ExplainError> {
    spec.validate()?;
    if models.is_empty() || features.n_rows() == 0 {
        return Err(ExplainError::EmptyInput);
    }
    let (focal, focal_values) = focal_numeric(features, &spec.feature)?;

    let mut edges: Vec<f64> = match &spec.explicit_grid {
        Some(g) => g.clone(),
        None => {
            let sorted = sorted_focal(focal_values);
            let (lo, hi) = spec.trim;
            let g = spec.grid_points;
            (0..=g).map(|i| quantile(&sorted, lo + (hi - lo) * i as f64 / g as f64)).collect()
        }
    };
    edges.dedup();
    if edges.len() < 2 {
        return Err(ExplainError::DegenerateSupport(spec.feature.clone()));
    }

    // bin assignment: (edges[k], edges[k+1]], with the lower boundary closed
    // for the first bin; then merge empty bins into their right neighbor
    // (the last one leftward) by dropping the shared edge
    loop {
        let bins = edges.len() - 1;
        let mut counts = vec![0u64; bins];
        for &v in focal_values {
            if let Some(k) = bin_of(&edges, v) {
                counts[k] += 1;
            }
        }
        match counts.iter().position(|&c| c == 0) {
            None => break,
            Some(_) if bins == 1 => {
                return Err(ExplainError::DegenerateSupport(spec.feature.clone()));
            }
            Some(k) => {
                // dropping the shared edge merges bin k into its right
                // neighbor (the previous one when k is the last bin)
                edges.remove(if k + 1 == bins { k } else { k + 1 });
            }
        }
    }
    let bins = edges.len() - 1;
    let mut rows_in_bin: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (r, &v) in focal_values.iter().enumerate() {
        if let Some(k) = bin_of(&edges, v) {
            rows_in_bin[k].push(r);
        }
    }

    let base = apply_variant(features, focal, &CurveVariant::PdpFull)?;
    let mut deltas = Vec::with_capacity(bins);
    for (k, rows) in rows_in_bin.iter().enumerate() {
        let sub = base.select_rows(rows);
        let mut upper = sub.clone();
        upper.fill_numeric(focal, edges[k + 1]);
        let mut lower = sub;
        lower.fill_numeric(focal, edges[k]);
        let mut d = 0.0;
        for model in models {
            let pu = model.predict(&upper)?;
            let pl = model.predict(&lower)?;
            d += pu
                .iter()
                .zip(&pl)
                .map(|(u, l)| u - l)
                .sum::<f64>()
                / rows.len() as f64;
        }
        deltas.push(d / models.len() as f64);
    }

    let support: Vec<u64> = rows_in_bin.iter().map(|r| r.len() as u64).collect();
    let mut values = Vec::with_capacity(bins);
    let mut acc = 0.0;
    for &d in &deltas {
        acc += d;
        values.push(acc);
    }
    let total: u64 = support.iter().sum();
    let center = values
        .iter()
        .zip(&support)
        .map(|(v, &n)| v * n as f64)
        .sum::<f64>()
        / total as f64;
    for v in &mut values {
        *v -= center;
    }
    Ok(Curve {
        feature: spec.feature.clone(),
        variant: "ale".to_string(),
        grid: edges[1..].to_vec(),
        values,
        support,
        axis_hint: spec.axis_hint.clone(),
    })
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    let last = edges.len() - 1;
    if v < edges[0] || v > edges[last] {
        return None;
    }
    if v == edges[0] {
        return Some(0);
    }
    let k = edges.partition_point(|e| *e < v);
    Some((k - 1).min(last - 1))
}
