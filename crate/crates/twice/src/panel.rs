//! Matched worker-firm panel: storage, CSV ingestion/emission, firm-level
//! holdout splits, and per-year summaries.
//!
//! Worker and firm identifiers are opaque strings interned to dense keys.
//! Each row is one worker-year observation carrying the log wage and the
//! covariate vector declared by the [`ColumnSchema`]. A (worker, year) pair
//! appears at most once; ingestion rejects duplicates. Categorical levels are
//! interned per column in first-seen order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::data::{
    ColumnKind, ColumnSchema, FeatureColumn, FeatureMatrix, FeatureSchema, FeatureSpec, Side,
    Value,
};

/// Dense key for an interned worker id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkerKey(pub u32);

/// Dense key for an interned firm id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FirmKey(pub u32);

/// One worker-year row.
#[derive(Debug, Clone)]
pub struct Observation {
    pub worker: WorkerKey,
    pub firm: FirmKey,
    pub year: i32,
    pub log_wage: f64,
    /// Covariate values aligned with the schema's column order.
    pub values: Vec<Value>,
}

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("malformed row at line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("duplicate observation for worker `{worker}` in year {year}")]
    DuplicateWorkerYear { worker: String, year: i32 },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("empty panel")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Incremental panel constructor shared by CSV ingestion and the generator.
pub struct PanelBuilder {
    schema: ColumnSchema,
    dicts: Vec<Vec<String>>,
    dict_maps: Vec<HashMap<String, u32>>,
    worker_ids: Vec<String>,
    worker_map: HashMap<String, u32>,
    firm_ids: Vec<String>,
    firm_map: HashMap<String, u32>,
    rows: Vec<Observation>,
    seen: HashMap<(u32, i32), ()>,
}

impl PanelBuilder {
    pub fn new(schema: ColumnSchema) -> Self {
        let n = schema.len();
        Self {
            schema,
            dicts: vec![Vec::new(); n],
            dict_maps: vec![HashMap::new(); n],
            worker_ids: Vec::new(),
            worker_map: HashMap::new(),
            firm_ids: Vec::new(),
            firm_map: HashMap::new(),
            rows: Vec::new(),
            seen: HashMap::new(),
        }
    }

    pub fn intern_worker(&mut self, id: &str) -> WorkerKey {
        if let Some(&k) = self.worker_map.get(id) {
            return WorkerKey(k);
        }
        let k = self.worker_ids.len() as u32;
        self.worker_ids.push(id.to_string());
        self.worker_map.insert(id.to_string(), k);
        WorkerKey(k)
    }

    pub fn intern_firm(&mut self, id: &str) -> FirmKey {
        if let Some(&k) = self.firm_map.get(id) {
            return FirmKey(k);
        }
        let k = self.firm_ids.len() as u32;
        self.firm_ids.push(id.to_string());
        self.firm_map.insert(id.to_string(), k);
        FirmKey(k)
    }

    /// Interns a categorical level, enforcing the declared cardinality cap.
    pub fn intern_level(&mut self, col: usize, level: &str) -> Result<u32, PanelError> {
        if let Some(&code) = self.dict_maps[col].get(level) {
            return Ok(code);
        }
        let cap = self.schema.columns[col].cardinality.unwrap_or(u32::MAX);
        let code = self.dicts[col].len() as u32;
        if code >= cap {
            return Err(PanelError::SchemaMismatch(format!(
                "column `{}` exceeds declared cardinality {}",
                self.schema.columns[col].name, cap
            )));
        }
        self.dicts[col].push(level.to_string());
        self.dict_maps[col].insert(level.to_string(), code);
        Ok(code)
    }

    pub fn push_row(
        &mut self,
        worker_id: &str,
        firm_id: &str,
        year: i32,
        log_wage: f64,
        values: Vec<Value>,
    ) -> Result<(), PanelError> {
        if values.len() != self.schema.len() {
            return Err(PanelError::SchemaMismatch(format!(
                "row has {} covariates, schema declares {}",
                values.len(),
                self.schema.len()
            )));
        }
        for (spec, v) in self.schema.columns.iter().zip(&values) {
            match (spec.kind, v) {
                (ColumnKind::Numeric, Value::Numeric(x)) if x.is_finite() => {}
                (ColumnKind::Categorical, Value::Categorical(c)) => {
                    let col = self.schema.position(&spec.name).unwrap();
                    if *c as usize >= self.dicts[col].len() {
                        return Err(PanelError::SchemaMismatch(format!(
                            "column `{}` holds code {} with no interned level",
                            spec.name, c
                        )));
                    }
                }
                _ => {
                    return Err(PanelError::SchemaMismatch(format!(
                        "column `{}` value does not match its declared kind",
                        spec.name
                    )));
                }
            }
        }
        if !log_wage.is_finite() {
            return Err(PanelError::SchemaMismatch("non-finite log wage".into()));
        }
        let worker = self.intern_worker(worker_id);
        let firm = self.intern_firm(firm_id);
        if self.seen.insert((worker.0, year), ()).is_some() {
            return Err(PanelError::DuplicateWorkerYear { worker: worker_id.to_string(), year });
        }
        self.rows.push(Observation { worker, firm, year, log_wage, values });
        Ok(())
    }

    pub fn finish(self) -> Result<Panel, PanelError> {
        if self.rows.is_empty() {
            return Err(PanelError::EmptyInput);
        }
        Ok(Panel::assemble(self.schema, self.dicts, self.worker_ids, self.firm_ids, self.rows))
    }
}

/// Immutable matched panel. All derived stages borrow it.
#[derive(Debug, Clone)]
pub struct Panel {
    schema: ColumnSchema,
    dicts: Vec<Vec<String>>,
    worker_ids: Vec<String>,
    firm_ids: Vec<String>,
    rows: Vec<Observation>,
    rows_by_worker: Vec<Vec<u32>>,
    rows_by_firm: Vec<Vec<u32>>,
    present_workers: usize,
    present_firms: usize,
}

impl Panel {
    fn assemble(
        schema: ColumnSchema,
        dicts: Vec<Vec<String>>,
        worker_ids: Vec<String>,
        firm_ids: Vec<String>,
        rows: Vec<Observation>,
    ) -> Self {
        let mut rows_by_worker = vec![Vec::new(); worker_ids.len()];
        let mut rows_by_firm = vec![Vec::new(); firm_ids.len()];
        for (i, r) in rows.iter().enumerate() {
            rows_by_worker[r.worker.0 as usize].push(i as u32);
            rows_by_firm[r.firm.0 as usize].push(i as u32);
        }
        let present_workers = rows_by_worker.iter().filter(|v| !v.is_empty()).count();
        let present_firms = rows_by_firm.iter().filter(|v| !v.is_empty()).count();
        Self {
            schema,
            dicts,
            worker_ids,
            firm_ids,
            rows,
            rows_by_worker,
            rows_by_firm,
            present_workers,
            present_firms,
        }
    }

    pub fn schema(&self) -> &ColumnSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Distinct workers appearing in at least one row.
    pub fn n_workers(&self) -> usize {
        self.present_workers
    }

    /// Distinct firms appearing in at least one row.
    pub fn n_firms(&self) -> usize {
        self.present_firms
    }

    pub fn worker_id(&self, key: WorkerKey) -> &str {
        &self.worker_ids[key.0 as usize]
    }

    pub fn firm_id(&self, key: FirmKey) -> &str {
        &self.firm_ids[key.0 as usize]
    }

    /// Number of interned worker keys (including keys filtered out of rows).
    pub fn worker_key_count(&self) -> usize {
        self.worker_ids.len()
    }

    pub fn firm_key_count(&self) -> usize {
        self.firm_ids.len()
    }

    /// Worker keys appearing in at least one row, in key order.
    pub fn present_worker_keys(&self) -> Vec<WorkerKey> {
        (0..self.worker_ids.len() as u32)
            .map(WorkerKey)
            .filter(|k| !self.rows_by_worker[k.0 as usize].is_empty())
            .collect()
    }

    /// Firm keys appearing in at least one row, in key order.
    pub fn present_firm_keys(&self) -> Vec<FirmKey> {
        (0..self.firm_ids.len() as u32)
            .map(FirmKey)
            .filter(|k| !self.rows_by_firm[k.0 as usize].is_empty())
            .collect()
    }

    /// Row indices of one worker, in insertion order.
    pub fn worker_rows(&self, key: WorkerKey) -> &[u32] {
        &self.rows_by_worker[key.0 as usize]
    }

    pub fn firm_rows(&self, key: FirmKey) -> &[u32] {
        &self.rows_by_firm[key.0 as usize]
    }

    pub fn level_name(&self, col: usize, code: u32) -> &str {
        &self.dicts[col][code as usize]
    }

    pub fn dictionary(&self, col: usize) -> &[String] {
        &self.dicts[col]
    }

    /// Keeps the listed rows (by index), preserving id tables and dictionaries.
    pub fn filter_rows(&self, keep: &[usize]) -> Panel {
        let rows = keep.iter().map(|&i| self.rows[i].clone()).collect();
        Panel::assemble(
            self.schema.clone(),
            self.dicts.clone(),
            self.worker_ids.clone(),
            self.firm_ids.clone(),
            rows,
        )
    }

    fn feature_spec_for(&self, col: usize) -> FeatureSpec {
        let spec = &self.schema.columns[col];
        match spec.kind {
            ColumnKind::Numeric => FeatureSpec::numeric(spec.name.clone()),
            ColumnKind::Categorical => {
                FeatureSpec::categorical(spec.name.clone(), self.dicts[col].clone())
            }
        }
    }

    fn columns_on_side(&self, side: Side) -> Vec<usize> {
        self.schema
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.side == side)
            .map(|(i, _)| i)
            .collect()
    }

    fn gather(&self, col: usize, rows: &[usize]) -> FeatureColumn {
        match self.schema.columns[col].kind {
            ColumnKind::Numeric => FeatureColumn::Numeric(
                rows.iter()
                    .map(|&r| match self.rows[r].values[col] {
                        Value::Numeric(x) => x,
                        Value::Categorical(_) => unreachable!("kind checked at build"),
                    })
                    .collect(),
            ),
            ColumnKind::Categorical => FeatureColumn::Categorical(
                rows.iter()
                    .map(|&r| match self.rows[r].values[col] {
                        Value::Categorical(c) => c,
                        Value::Numeric(_) => unreachable!("kind checked at build"),
                    })
                    .collect(),
            ),
        }
    }

    /// Per-observation matrix of worker-side covariates (no calendar year).
    pub fn worker_matrix(&self, rows: &[usize]) -> FeatureMatrix {
        let cols = self.columns_on_side(Side::Worker);
        let schema = FeatureSchema::new(cols.iter().map(|&c| self.feature_spec_for(c)).collect());
        let columns = cols.iter().map(|&c| self.gather(c, rows)).collect();
        FeatureMatrix::new(schema, columns).expect("panel columns are schema-consistent")
    }

    /// Per-observation matrix of worker-side covariates plus calendar year.
    pub fn worker_matrix_with_year(&self, rows: &[usize]) -> FeatureMatrix {
        let cols = self.columns_on_side(Side::Worker);
        let mut specs: Vec<FeatureSpec> =
            cols.iter().map(|&c| self.feature_spec_for(c)).collect();
        specs.push(FeatureSpec::numeric("year"));
        let mut columns: Vec<FeatureColumn> =
            cols.iter().map(|&c| self.gather(c, rows)).collect();
        columns.push(FeatureColumn::Numeric(
            rows.iter().map(|&r| self.rows[r].year as f64).collect(),
        ));
        FeatureMatrix::new(FeatureSchema::new(specs), columns)
            .expect("panel columns are schema-consistent")
    }

    /// Column indices of one side's covariates, in schema order.
    pub fn side_columns(&self, side: Side) -> Vec<usize> {
        self.columns_on_side(side)
    }

    /// Feature description of one panel column.
    pub fn feature_spec(&self, col: usize) -> FeatureSpec {
        self.feature_spec_for(col)
    }

    /// Per-observation matrix of firm-side covariates plus calendar year.
    pub fn firm_matrix(&self, rows: &[usize]) -> FeatureMatrix {
        let cols = self.columns_on_side(Side::Firm);
        let mut specs: Vec<FeatureSpec> =
            cols.iter().map(|&c| self.feature_spec_for(c)).collect();
        specs.push(FeatureSpec::numeric("year"));
        let mut columns: Vec<FeatureColumn> =
            cols.iter().map(|&c| self.gather(c, rows)).collect();
        columns.push(FeatureColumn::Numeric(
            rows.iter().map(|&r| self.rows[r].year as f64).collect(),
        ));
        FeatureMatrix::new(FeatureSchema::new(specs), columns)
            .expect("panel columns are schema-consistent")
    }

    /// Full observable matrix for wage models: every covariate plus calendar
    /// year, optionally extended with worker/firm cell indicator columns
    /// (1-based cell ids, `cells` aligned with `rows`).
    pub fn wage_matrix(
        &self,
        rows: &[usize],
        cells: Option<(&[u32], &[u32], usize, usize)>,
    ) -> FeatureMatrix {
        let n_cols = self.schema.len();
        let mut specs: Vec<FeatureSpec> = (0..n_cols).map(|c| self.feature_spec_for(c)).collect();
        specs.push(FeatureSpec::numeric("year"));
        let mut columns: Vec<FeatureColumn> = (0..n_cols).map(|c| self.gather(c, rows)).collect();
        columns.push(FeatureColumn::Numeric(
            rows.iter().map(|&r| self.rows[r].year as f64).collect(),
        ));
        if let Some((worker_cell, firm_cell, l, k)) = cells {
            debug_assert_eq!(worker_cell.len(), rows.len());
            debug_assert_eq!(firm_cell.len(), rows.len());
            let levels = |n: usize| (1..=n).map(|i| i.to_string()).collect::<Vec<_>>();
            specs.push(FeatureSpec::categorical("worker_cell", levels(l)));
            columns.push(FeatureColumn::Categorical(
                worker_cell.iter().map(|&c| c - 1).collect(),
            ));
            specs.push(FeatureSpec::categorical("firm_cell", levels(k)));
            columns.push(FeatureColumn::Categorical(firm_cell.iter().map(|&c| c - 1).collect()));
        }
        FeatureMatrix::new(FeatureSchema::new(specs), columns)
            .expect("panel columns are schema-consistent")
    }

    pub fn wages(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.rows[r].log_wage).collect()
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.rows.len()).collect()
    }
}

/// Reads a panel from CSV. Expected header: `worker_id,firm_id,year,log_wage`
/// followed by the schema's covariate names in order. Line numbers in errors
/// are physical file lines (the header is line 1).
pub fn ingest_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Panel, PanelError> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv_reader
        .headers()
        .map_err(|e| PanelError::SchemaMismatch(format!("unreadable header: {e}")))?
        .clone();
    let mut expected: Vec<&str> = vec!["worker_id", "firm_id", "year", "log_wage"];
    expected.extend(schema.columns.iter().map(|c| c.name.as_str()));
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(PanelError::SchemaMismatch(format!(
            "header mismatch: expected {expected:?}, found {got:?}"
        )));
    }

    let mut builder = PanelBuilder::new(schema.clone());
    for record in csv_reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, csv::Position::line);
            PanelError::MalformedRow { line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        let malformed = |message: String| PanelError::MalformedRow { line, message };
        if record.len() != expected.len() {
            return Err(malformed(format!(
                "{} fields, expected {}",
                record.len(),
                expected.len()
            )));
        }
        let worker_id = record.get(0).unwrap();
        let firm_id = record.get(1).unwrap();
        if worker_id.is_empty() || firm_id.is_empty() {
            return Err(malformed("empty identifier".into()));
        }
        let year: i32 = record
            .get(2)
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| malformed(format!("unparseable year `{}`", record.get(2).unwrap())))?;
        let wage: f64 = record
            .get(3)
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| malformed(format!("unparseable wage `{}`", record.get(3).unwrap())))?;
        if !wage.is_finite() {
            return Err(malformed("non-finite wage".into()));
        }
        let mut values = Vec::with_capacity(schema.len());
        for (col, spec) in schema.columns.iter().enumerate() {
            let raw = record.get(4 + col).unwrap();
            match spec.kind {
                ColumnKind::Numeric => {
                    let x: f64 = raw.trim().parse().map_err(|_| {
                        malformed(format!("unparseable value `{raw}` in column `{}`", spec.name))
                    })?;
                    if !x.is_finite() {
                        return Err(malformed(format!(
                            "non-finite value in column `{}`",
                            spec.name
                        )));
                    }
                    values.push(Value::Numeric(x));
                }
                ColumnKind::Categorical => {
                    let code = builder.intern_level(col, raw)?;
                    values.push(Value::Categorical(code));
                }
            }
        }
        builder.push_row(worker_id, firm_id, year, wage, values)?;
    }
    builder.finish()
}

pub fn ingest_csv_path(path: &Path, schema: &ColumnSchema) -> Result<Panel, PanelError> {
    let file = std::fs::File::open(path)?;
    ingest_csv(std::io::BufReader::new(file), schema)
}

/// Writes a panel back to CSV in the ingestion layout.
pub fn emit_csv<W: Write>(panel: &Panel, writer: W) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = vec!["worker_id", "firm_id", "year", "log_wage"];
    header.extend(panel.schema.columns.iter().map(|c| c.name.as_str()));
    w.write_record(&header).map_err(io_from_csv)?;
    for row in &panel.rows {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        rec.push(panel.worker_id(row.worker).to_string());
        rec.push(panel.firm_id(row.firm).to_string());
        rec.push(row.year.to_string());
        rec.push(format!("{}", row.log_wage));
        for (col, v) in row.values.iter().enumerate() {
            match v {
                Value::Numeric(x) => rec.push(format!("{x}")),
                Value::Categorical(c) => rec.push(panel.level_name(col, *c).to_string()),
            }
        }
        w.write_record(&rec).map_err(io_from_csv)?;
    }
    w.flush()?;
    Ok(())
}

fn io_from_csv(e: csv::Error) -> PanelError {
    PanelError::SchemaMismatch(format!("csv write failure: {e}"))
}

/// Firm-level holdout: samples `firm_fraction` of firms into the test side,
/// then keeps `worker_fraction` of the workers observed at those firms. Rows
/// of non-sampled workers at held-out firms are dropped. The train side never
/// contains a held-out firm's row.
pub fn holdout_split(
    panel: &Panel,
    firm_fraction: f64,
    worker_fraction: f64,
    seed: u64,
) -> Result<(Panel, Panel), PanelError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if !(0.0..1.0).contains(&firm_fraction) || firm_fraction <= 0.0 {
        return Err(PanelError::DegenerateSplit(format!(
            "firm_fraction {firm_fraction} outside (0, 1)"
        )));
    }
    if !(0.0..=1.0).contains(&worker_fraction) || worker_fraction <= 0.0 {
        return Err(PanelError::DegenerateSplit(format!(
            "worker_fraction {worker_fraction} outside (0, 1]"
        )));
    }

    let mut firms: Vec<u32> = (0..panel.firm_ids.len() as u32)
        .filter(|&k| !panel.rows_by_firm[k as usize].is_empty())
        .collect();
    firms.sort_by(|&a, &b| panel.firm_ids[a as usize].cmp(&panel.firm_ids[b as usize]));
    let n_firms = firms.len();
    let n_test = (n_firms as f64 * firm_fraction).round() as usize;
    if n_test == 0 || n_test >= n_firms {
        return Err(PanelError::DegenerateSplit(format!(
            "{n_test} of {n_firms} firms held out"
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    firms.shuffle(&mut rng);
    let test_firms: std::collections::HashSet<u32> = firms[..n_test].iter().copied().collect();

    let mut test_workers: Vec<u32> = {
        let mut set = std::collections::HashSet::new();
        for row in &panel.rows {
            if test_firms.contains(&row.firm.0) {
                set.insert(row.worker.0);
            }
        }
        set.into_iter().collect()
    };
    test_workers.sort_by(|&a, &b| panel.worker_ids[a as usize].cmp(&panel.worker_ids[b as usize]));
    let kept_workers: std::collections::HashSet<u32> = if worker_fraction < 1.0 {
        let n_keep = ((test_workers.len() as f64) * worker_fraction).round().max(1.0) as usize;
        test_workers.shuffle(&mut rng);
        test_workers[..n_keep.min(test_workers.len())].iter().copied().collect()
    } else {
        test_workers.iter().copied().collect()
    };

    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for (i, row) in panel.rows.iter().enumerate() {
        if test_firms.contains(&row.firm.0) {
            if kept_workers.contains(&row.worker.0) {
                test_rows.push(i);
            }
        } else {
            train_rows.push(i);
        }
    }
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(PanelError::DegenerateSplit("a split side has no rows".into()));
    }
    Ok((panel.filter_rows(&train_rows), panel.filter_rows(&test_rows)))
}

/// One calendar year of the panel, as reported by [`summarize`].
#[derive(Debug, Clone, Serialize)]
pub struct YearSummary {
    pub year: i32,
    pub n_firms: usize,
    pub n_workers: usize,
    pub mean_log_wage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PanelSummary {
    pub n_rows: usize,
    pub n_workers: usize,
    pub n_firms: usize,
    pub mean_log_wage: f64,
    pub years: Vec<YearSummary>,
}

pub fn summarize(panel: &Panel) -> PanelSummary {
    let mut by_year: std::collections::BTreeMap<i32, (Vec<u32>, Vec<u32>, f64, usize)> =
        std::collections::BTreeMap::new();
    let mut total = 0.0;
    for row in &panel.rows {
        let e = by_year.entry(row.year).or_insert_with(|| (Vec::new(), Vec::new(), 0.0, 0));
        e.0.push(row.worker.0);
        e.1.push(row.firm.0);
        e.2 += row.log_wage;
        e.3 += 1;
        total += row.log_wage;
    }
    let years = by_year
        .into_iter()
        .map(|(year, (mut workers, mut firms, sum, n))| {
            workers.sort_unstable();
            workers.dedup();
            firms.sort_unstable();
            firms.dedup();
            YearSummary {
                year,
                n_firms: firms.len(),
                n_workers: workers.len(),
                mean_log_wage: sum / n as f64,
            }
        })
        .collect();
    PanelSummary {
        n_rows: panel.n_rows(),
        n_workers: panel.n_workers(),
        n_firms: panel.n_firms(),
        mean_log_wage: total / panel.n_rows() as f64,
        years,
    }
}
