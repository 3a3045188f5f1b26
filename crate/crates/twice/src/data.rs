//! Column schemas and the dense feature representation shared by all models.
//!
//! A [`ColumnSchema`] declares the covariate columns of a panel (name, kind,
//! which side of the match they describe). Models never see the panel
//! directly; they consume a [`FeatureMatrix`], a column-major table of f64
//! numerics and interned categorical codes, described by a [`FeatureSchema`]
//! that carries the per-column level dictionaries. The dictionaries travel
//! with every serialized model so codes stay meaningful across processes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which side of the worker-firm match a covariate describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Worker,
    Firm,
}

/// Declared type of a covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    /// `cardinality` is the maximum number of distinct levels the column may
    /// hold; ingestion interns levels in first-seen order and rejects files
    /// that exceed it.
    Categorical,
}

/// Declaration of one covariate column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub side: Side,
    /// Level capacity for categorical columns; ignored for numeric ones.
    #[serde(default)]
    pub cardinality: Option<u32>,
}

impl ColumnSpec {
    pub fn numeric(name: &str, side: Side) -> Self {
        Self { name: name.to_string(), kind: ColumnKind::Numeric, side, cardinality: None }
    }

    pub fn categorical(name: &str, side: Side, cardinality: u32) -> Self {
        Self {
            name: name.to_string(),
            kind: ColumnKind::Categorical,
            side,
            cardinality: Some(cardinality),
        }
    }
}

/// Ordered covariate declarations for a panel. Core fields (ids, year, wage)
/// are not part of the schema; it covers covariates only.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub columns: Vec<ColumnSpec>,
}

impl ColumnSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Self {
        Self { columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// A single covariate value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Numeric(f64),
    /// Interned level code, valid against the owning column's dictionary.
    Categorical(u32),
}

/// Feature kind plus whatever vocabulary the kind needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureKind {
    Numeric,
    /// `levels[code]` is the display name of the interned code.
    Categorical { levels: Vec<String> },
}

/// One feature column as a model sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Numeric }
    }

    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Categorical { levels } }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, FeatureKind::Numeric)
    }

    /// Number of levels for categorical features, 0 for numeric ones.
    pub fn cardinality(&self) -> u32 {
        match &self.kind {
            FeatureKind::Numeric => 0,
            FeatureKind::Categorical { levels } => levels.len() as u32,
        }
    }
}

/// Ordered feature declarations for a [`FeatureMatrix`], including level
/// dictionaries. Persisted alongside every fitted model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Self {
        Self { features }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }
}

/// One column of feature data.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureColumn {
    Numeric(Vec<f64>),
    Categorical(Vec<u32>),
}

impl FeatureColumn {
    pub fn len(&self) -> usize {
        match self {
            FeatureColumn::Numeric(v) => v.len(),
            FeatureColumn::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("feature matrix mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
}

/// Column-major feature table. All columns have the same length; categorical
/// codes are bounded by the schema's dictionaries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    schema: FeatureSchema,
    columns: Vec<FeatureColumn>,
    n_rows: usize,
}

impl FeatureMatrix {
    pub fn new(schema: FeatureSchema, columns: Vec<FeatureColumn>) -> Result<Self, DataError> {
        if schema.len() != columns.len() {
            return Err(DataError::SchemaMismatch(format!(
                "{} schema features but {} columns",
                schema.len(),
                columns.len()
            )));
        }
        let n_rows = columns.first().map_or(0, FeatureColumn::len);
        for (spec, col) in schema.features.iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(DataError::SchemaMismatch(format!(
                    "column `{}` has {} rows, expected {}",
                    spec.name,
                    col.len(),
                    n_rows
                )));
            }
            match (&spec.kind, col) {
                (FeatureKind::Numeric, FeatureColumn::Numeric(_)) => {}
                (FeatureKind::Categorical { levels }, FeatureColumn::Categorical(codes)) => {
                    let card = levels.len() as u32;
                    if let Some(bad) = codes.iter().find(|&&c| c >= card) {
                        return Err(DataError::SchemaMismatch(format!(
                            "column `{}` holds code {} beyond cardinality {}",
                            spec.name, bad, card
                        )));
                    }
                }
                _ => {
                    return Err(DataError::SchemaMismatch(format!(
                        "column `{}` data does not match its declared kind",
                        spec.name
                    )));
                }
            }
        }
        Ok(Self { schema, columns, n_rows })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, idx: usize) -> &FeatureColumn {
        &self.columns[idx]
    }

    pub fn column_by_name(&self, name: &str) -> Result<(usize, &FeatureColumn), DataError> {
        let idx = self
            .schema
            .position(name)
            .ok_or_else(|| DataError::UnknownFeature(name.to_string()))?;
        Ok((idx, &self.columns[idx]))
    }

    pub fn value(&self, row: usize, col: usize) -> Value {
        match &self.columns[col] {
            FeatureColumn::Numeric(v) => Value::Numeric(v[row]),
            FeatureColumn::Categorical(v) => Value::Categorical(v[row]),
        }
    }

    /// Replaces a column in place, keeping schema and length invariants.
    pub fn set_column(&mut self, idx: usize, col: FeatureColumn) -> Result<(), DataError> {
        if col.len() != self.n_rows {
            return Err(DataError::SchemaMismatch(format!(
                "replacement column has {} rows, expected {}",
                col.len(),
                self.n_rows
            )));
        }
        let matches = matches!(
            (&self.schema.features[idx].kind, &col),
            (FeatureKind::Numeric, FeatureColumn::Numeric(_))
                | (FeatureKind::Categorical { .. }, FeatureColumn::Categorical(_))
        );
        if !matches {
            return Err(DataError::SchemaMismatch(format!(
                "replacement for `{}` does not match its declared kind",
                self.schema.features[idx].name
            )));
        }
        if let (FeatureKind::Categorical { levels }, FeatureColumn::Categorical(codes)) =
            (&self.schema.features[idx].kind, &col)
        {
            let card = levels.len() as u32;
            if codes.iter().any(|&c| c >= card) {
                return Err(DataError::SchemaMismatch(format!(
                    "replacement for `{}` holds codes beyond cardinality {}",
                    self.schema.features[idx].name, card
                )));
            }
        }
        self.columns[idx] = col;
        Ok(())
    }

    /// Overwrites every entry of a numeric column with one value.
    pub fn fill_numeric(&mut self, idx: usize, value: f64) {
        if let FeatureColumn::Numeric(v) = &mut self.columns[idx] {
            v.iter_mut().for_each(|x| *x = value);
        }
    }

    /// Row-subset copy preserving column order and dictionaries.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let columns = self
            .columns
            .iter()
            .map(|col| match col {
                FeatureColumn::Numeric(v) => {
                    FeatureColumn::Numeric(rows.iter().map(|&r| v[r]).collect())
                }
                FeatureColumn::Categorical(v) => {
                    FeatureColumn::Categorical(rows.iter().map(|&r| v[r]).collect())
                }
            })
            .collect();
        FeatureMatrix { schema: self.schema.clone(), columns, n_rows: rows.len() }
    }
}
