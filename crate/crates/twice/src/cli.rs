//! Command-line orchestration of the full pipeline.
//!
//! Nine commands share one TOML configuration (see [`crate::config`]) and an
//! output directory: `simulate` writes a synthetic panel, `connect` restricts
//! it to the largest connected component, `tune` grid-searches cell counts
//! under two-way ID-blocked cross-fitting, `fit` builds the final partitions
//! and wage models, `decompose` projects cell means into additive effects and
//! variance shares, `akm` runs the fixed-effects benchmark with OLS
//! baselines, `explain` emits feature curves and importances, `eventstudy`
//! tabulates wages around job moves, and `robustness` reruns the
//! decomposition under alternative firm targets.
//!
//! Artifact discipline: every emitted file lands in the output directory and
//! is listed in `manifest.json` together with the configuration hash and each
//! stage's derived seed and timing. Commands validate their inputs against
//! the manifest and fail with a missing-artifact error (exit code 1) when an
//! upstream stage has not run; configuration and validation problems also
//! exit 1, runtime failures exit 2. Tabular artifacts are CSV with a JSON
//! schema sidecar; model artifacts are versioned JSON. Reruns with an
//! unchanged configuration are byte-identical except for the manifest's
//! timings, because every stochastic choice — simulation included — is seeded
//! from the master seed and the stage name.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::akm::{akm_decomposition, eta_squared, fit_akm, fit_ols_baselines, spearman, AkmError};
use crate::boost::BoostedEnsemble;
use crate::config::{ConfigError, RunConfig};
use crate::crossfit::{blocked_risk, crossfit_predict, make_fold_plan, tune_grid, CrossfitError};
use crate::data::{ColumnKind, ColumnSchema, FeatureMatrix};
use crate::decompose::{
    cell_stats, decompose_variance, project_additive, sorting_matrix, DecomposeError,
    PROJECTION_MAX_ITER, PROJECTION_TOL,
};
use crate::explain::{ale, pdp, CurveSpec, ExplainError};
use crate::graph::{event_study, largest_connected_set, GraphError};
use crate::model::{
    BoostedLearner, ConstantModel, Fitted, LearnerRegistry, LinearModel, ModelError, TrainSet,
    TreeLearner,
};
use crate::panel::{emit_csv, ingest_csv_path, summarize, holdout_split, Panel, PanelError};
use crate::partition::{
    assign_cells, build_firm_partition, build_worker_partition, describe_cells, PartitionError,
    PartitionPair,
};
use crate::synth::{generate, SynthError};
use crate::tree::RegressionTree;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact from stage `{stage}`; run `twice {stage}` first")]
    MissingArtifact { stage: String },
    #[error("{0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Crossfit(#[from] CrossfitError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Akm(#[from] AkmError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl CliError {
    /// 1 for configuration/validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::MissingArtifact { .. } => 1,
            _ => 2,
        }
    }
}

fn invalid(key: &str, reason: &str) -> CliError {
    CliError::Config(ConfigError::ConfigInvalid { key: key.to_string(), reason: reason.to_string() })
}

// ---------------------------------------------------------------------------
// run manifest

/// One stage's entry in the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    /// Seed the stage derived from the master seed.
    pub seed: u64,
    pub duration_ms: u64,
    /// Files the stage wrote, relative to the output directory.
    pub artifacts: Vec<String>,
}

/// Ledger of what has run in an output directory, under which configuration.
/// A changed configuration hash invalidates all recorded stages, so stale
/// artifacts are never silently reused.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    fn fresh(config: &RunConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash(),
            master_seed: config.pipeline.seed,
            stages: BTreeMap::new(),
        }
    }

    /// Loads the directory's manifest, discarding recorded stages when the
    /// configuration hash no longer matches.
    pub fn load_or_new(out: &Path, config: &RunConfig) -> Self {
        let path = out.join(MANIFEST_FILE);
        let loaded: Option<RunManifest> = fs::read_to_string(&path)
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok());
        match loaded {
            Some(m) if m.config_hash == config.hash() => m,
            _ => Self::fresh(config),
        }
    }

    /// Errors unless `stage` has run under the current configuration and all
    /// its listed artifacts still exist.
    pub fn require(&self, stage: &str, out: &Path) -> Result<(), CliError> {
        let record = self
            .stages
            .get(stage)
            .ok_or_else(|| CliError::MissingArtifact { stage: stage.to_string() })?;
        for name in &record.artifacts {
            if !out.join(name).exists() {
                return Err(CliError::MissingArtifact { stage: stage.to_string() });
            }
        }
        Ok(())
    }

    pub fn save(&self, out: &Path) -> Result<(), CliError> {
        write_json(out, MANIFEST_FILE, self)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// artifact helpers

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(out.join(name), text)?;
    Ok(name.to_string())
}

#[derive(Clone, Copy)]
enum ColType {
    Str,
    Int,
    Float,
}

impl ColType {
    fn as_str(self) -> &'static str {
        match self {
            ColType::Str => "string",
            ColType::Int => "integer",
            ColType::Float => "float",
        }
    }
}

/// CSV artifact plus its schema sidecar. Floats are rendered with Rust's
/// shortest round-trip formatting, so rewrites are byte-identical.
struct Table {
    name: &'static str,
    columns: Vec<(&'static str, ColType)>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, columns: Vec<(&'static str, ColType)>) -> Self {
        Self { name, columns, rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width matches schema");
        self.rows.push(row);
    }

    fn write(self, out: &Path) -> Result<Vec<String>, CliError> {
        let csv_name = format!("{}.csv", self.name);
        let mut writer = csv::Writer::from_path(out.join(&csv_name))?;
        writer.write_record(self.columns.iter().map(|(n, _)| *n))?;
        for row in &self.rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
        let schema_name = format!("{}.schema.json", self.name);
        let columns: Vec<_> = self
            .columns
            .iter()
            .map(|(n, t)| json!({ "name": n, "type": t.as_str() }))
            .collect();
        write_json(out, &schema_name, &json!({ "columns": columns }))?;
        Ok(vec![csv_name, schema_name])
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// Schema sidecar for a panel CSV (core fields plus declared covariates).
fn panel_sidecar(schema: &ColumnSchema) -> serde_json::Value {
    let mut columns = vec![
        json!({ "name": "worker_id", "type": "string" }),
        json!({ "name": "firm_id", "type": "string" }),
        json!({ "name": "year", "type": "integer" }),
        json!({ "name": "log_wage", "type": "float" }),
    ];
    for col in &schema.columns {
        let side = match col.side {
            crate::data::Side::Worker => "worker",
            crate::data::Side::Firm => "firm",
        };
        columns.push(match col.kind {
            ColumnKind::Numeric => {
                json!({ "name": col.name, "type": "float", "side": side })
            }
            ColumnKind::Categorical => json!({
                "name": col.name,
                "type": "string",
                "side": side,
                "cardinality": col.cardinality,
            }),
        });
    }
    json!({ "columns": columns })
}

fn write_panel(out: &Path, name: &str, panel: &Panel) -> Result<Vec<String>, CliError> {
    let csv_name = format!("{name}.csv");
    let file = fs::File::create(out.join(&csv_name))?;
    let mut buffered = std::io::BufWriter::new(file);
    emit_csv(panel, &mut buffered)?;
    buffered.flush()?;
    let schema_name = format!("{name}.schema.json");
    write_json(out, &schema_name, &panel_sidecar(panel.schema()))?;
    Ok(vec![csv_name, schema_name])
}

// ---------------------------------------------------------------------------
// shared stage plumbing

/// Learners available to the pipeline, with the configured boosting and tree
/// shapes registered over the defaults.
fn registry(config: &RunConfig) -> LearnerRegistry {
    let mut reg = LearnerRegistry::builtin();
    reg.register(Box::new(BoostedLearner::new(config.boost.clone())));
    reg.register(Box::new(TreeLearner::new(crate::tree::TreeFitConfig {
        max_leaves: config.boost.max_leaves,
        max_depth: config.boost.max_depth,
        min_leaf_size: config.boost.min_leaf_size,
        numeric_candidates: config.boost.numeric_candidates,
        seed: 0,
    })));
    reg
}

/// Reconstructs a fitted model from its JSON artifact by learner name.
fn fitted_from_json(learner: &str, value: serde_json::Value) -> Result<Box<dyn Fitted>, CliError> {
    Ok(match learner {
        "constant" => Box::new(serde_json::from_value::<ConstantModel>(value)?),
        "ols" => Box::new(serde_json::from_value::<LinearModel>(value)?),
        "tree" => Box::new(serde_json::from_value::<RegressionTree>(value)?),
        "boosted" => Box::new(serde_json::from_value::<BoostedEnsemble>(value)?),
        other => {
            return Err(CliError::Runtime(format!("unknown learner `{other}` in model artifact")))
        }
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(out: &Path, name: &str) -> Result<T, CliError> {
    Ok(serde_json::from_str(&fs::read_to_string(out.join(name))?)?)
}

/// The panel a non-simulate command starts from: the simulated CSV (for
/// synthetic inputs, requiring the simulate stage) or the configured file.
fn source_panel(config: &RunConfig, out: &Path) -> Result<Panel, CliError> {
    if config.input.synthetic.is_some() {
        RunManifest::load_or_new(out, config).require("simulate", out)?;
        Ok(ingest_csv_path(&out.join("panel.csv"), &config.column_schema())?)
    } else {
        let path = config.input.csv.as_ref().expect("validated input");
        Ok(ingest_csv_path(path, &config.column_schema())?)
    }
}

fn connected_panel(config: &RunConfig, out: &Path) -> Result<Panel, CliError> {
    RunManifest::load_or_new(out, config).require("connect", out)?;
    Ok(ingest_csv_path(&out.join("connected.csv"), &config.column_schema())?)
}

fn train_holdout(config: &RunConfig, connected: &Panel) -> Result<(Panel, Panel), CliError> {
    Ok(holdout_split(
        connected,
        config.pipeline.holdout_firm_fraction,
        config.pipeline.holdout_worker_fraction,
        config.stage_seed("holdout"),
    )?)
}

/// Row indices of `child`'s observations inside `parent`. Both panels share
/// interned keys (holdout splits and component filters preserve them), and a
/// panel holds one row per worker-year, so the pair identifies a row.
fn match_rows(parent: &Panel, child: &Panel) -> Vec<usize> {
    let index: BTreeMap<(u32, i32), usize> = parent
        .rows()
        .iter()
        .enumerate()
        .map(|(i, obs)| ((obs.worker.0, obs.year), i))
        .collect();
    child.rows().iter().map(|obs| index[&(obs.worker.0, obs.year)]).collect()
}

/// The tuned or explicitly configured cell counts for the fit stage.
fn selected_cells(config: &RunConfig, out: &Path) -> Result<(usize, usize), CliError> {
    if let (Some(k), Some(l)) = (config.pipeline.k, config.pipeline.l) {
        return Ok((k, l));
    }
    let manifest = RunManifest::load_or_new(out, config);
    manifest.require("tune", out)?;
    #[derive(Deserialize)]
    struct Selected {
        k: usize,
        l: usize,
    }
    let selected: Selected = read_json(out, "selected.json")?;
    Ok((selected.k, selected.l))
}

/// Builds worker and firm partitions on the training rows and assigns cells.
fn build_partitions(
    config: &RunConfig,
    train: &Panel,
    k: usize,
    l: usize,
) -> Result<PartitionPair, CliError> {
    let rows = train.all_rows();
    let target = config.firm_target.build(config.stage_seed("firm-target"), &config.boost);
    let firm_tree = build_firm_partition(train, &rows, k, &target, &config.tree)?;
    let worker_tree = build_worker_partition(train, &rows, l, &config.tree)?;
    Ok(PartitionPair::new(firm_tree, worker_tree))
}

/// Feature matrix for wage models: covariates, year, and the pair's cell
/// labels for the given rows.
fn model_matrix(
    panel: &Panel,
    rows: &[usize],
    pair: &PartitionPair,
) -> Result<FeatureMatrix, CliError> {
    let cells = assign_cells(panel, rows, pair)?;
    let (worker_cells, firm_cells): (Vec<u32>, Vec<u32>) = cells.into_iter().unzip();
    Ok(panel.wage_matrix(rows, Some((&worker_cells, &firm_cells, pair.l, pair.k))))
}

fn run_stage<F>(config: &RunConfig, out: &Path, stage: &str, body: F) -> Result<(), CliError>
where
    F: FnOnce() -> Result<Vec<String>, CliError>,
{
    let started = Instant::now();
    let artifacts = body()?;
    let mut manifest = RunManifest::load_or_new(out, config);
    manifest.stages.insert(
        stage.to_string(),
        StageRecord {
            seed: config.stage_seed(stage),
            duration_ms: started.elapsed().as_millis() as u64,
            artifacts: artifacts.clone(),
        },
    );
    manifest.save(out)?;
    log::info!("{stage}: wrote {} in {:.1}s", artifacts.join(", "), started.elapsed().as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------------------
// commands

fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    run_stage(config, out, "simulate", || {
        let mut spec = config
            .input
            .synthetic
            .clone()
            .ok_or_else(|| invalid("input.synthetic", "simulate needs a synthetic spec"))?;
        // The master seed governs simulation too: the generator stream mixes
        // the spec's own seed with the stage seed.
        spec.seed ^= config.stage_seed("simulate");
        let (panel, truth) = generate(&spec)?;
        let mut artifacts = write_panel(out, "panel", &panel)?;
        artifacts.push(write_json(out, "ground_truth.json", &truth)?);
        artifacts.push(write_json(out, "summary.json", &summarize(&panel))?);
        Ok(artifacts)
    })
}

fn cmd_connect(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    run_stage(config, out, "connect", || {
        let panel = source_panel(config, out)?;
        let (connected, stats) = largest_connected_set(&panel)?;
        let mut artifacts = write_panel(out, "connected", &connected)?;
        artifacts.push(write_json(out, "connectivity.json", &stats)?);
        Ok(artifacts)
    })
}

fn cmd_tune(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    run_stage(config, out, "tune", || {
        let connected = connected_panel(config, out)?;
        let (train, _) = train_holdout(config, &connected)?;
        let plan = make_fold_plan(&train, config.pipeline.b, config.stage_seed("folds"))?;
        let reg = registry(config);
        let learner = reg.get(&config.pipeline.model)?;
        let target = config.firm_target.build(config.stage_seed("firm-target"), &config.boost);
        let all = train.all_rows();
        let result = tune_grid(
            &train,
            &plan,
            &config.tuning_grid(),
            learner,
            |train_rows, k, l| {
                let wrap = |e: PartitionError| CrossfitError::Featurize(e.to_string());
                let firm_tree = build_firm_partition(&train, train_rows, k, &target, &config.tree)
                    .map_err(wrap)?;
                let worker_tree =
                    build_worker_partition(&train, train_rows, l, &config.tree).map_err(wrap)?;
                let pair = PartitionPair::new(firm_tree, worker_tree);
                let cells = assign_cells(&train, &all, &pair)
                    .map_err(|e| CrossfitError::Featurize(e.to_string()))?;
                let (worker_cells, firm_cells): (Vec<u32>, Vec<u32>) = cells.into_iter().unzip();
                Ok(train.wage_matrix(&all, Some((&worker_cells, &firm_cells, pair.l, pair.k))))
            },
        )?;

        let mut artifacts = Vec::new();
        artifacts.push(write_json(out, "fold_plan.json", &plan.to_artifact(&train))?);
        let mut table = Table::new(
            "loss_table",
            vec![
                ("k", ColType::Int),
                ("l", ColType::Int),
                ("loss", ColType::Float),
                ("cells_used", ColType::Int),
            ],
        );
        for row in &result.table {
            table.push(vec![
                row.k.to_string(),
                row.l.to_string(),
                fmt_f(row.loss),
                row.cells_used.to_string(),
            ]);
        }
        artifacts.extend(table.write(out)?);
        let best = result
            .table
            .iter()
            .find(|r| (r.k, r.l) == (result.k, result.l))
            .expect("selected pair is on the grid");
        artifacts.push(write_json(
            out,
            "selected.json",
            &json!({
                "k": result.k,
                "l": result.l,
                "b": config.pipeline.b,
                "loss": best.loss,
                "cells_used": best.cells_used,
            }),
        )?);
        Ok(artifacts)
    })
}

fn cmd_fit(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (k, l) = selected_cells(config, out)?;
    run_stage(config, out, "fit", || {
        let connected = connected_panel(config, out)?;
        let (train, holdout) = train_holdout(config, &connected)?;
        let pair = build_partitions(config, &train, k, l)?;
        let mut artifacts = Vec::new();
        artifacts.push(write_json(out, "partition.json", &pair)?);
        let (worker_rules, firm_rules) = describe_cells(&pair);
        artifacts.push(write_json(
            out,
            "cell_rules.json",
            &json!({ "worker": worker_rules, "firm": firm_rules }),
        )?);

        // Cell labels for the whole connected panel.
        let connected_rows = connected.all_rows();
        let assignments = assign_cells(&connected, &connected_rows, &pair)?;
        let mut cells_table = Table::new(
            "cells",
            vec![
                ("worker_id", ColType::Str),
                ("firm_id", ColType::Str),
                ("year", ColType::Int),
                ("worker_cell", ColType::Int),
                ("firm_cell", ColType::Int),
            ],
        );
        for (i, &r) in connected_rows.iter().enumerate() {
            let obs = &connected.rows()[r];
            cells_table.push(vec![
                connected.worker_id(obs.worker).to_string(),
                connected.firm_id(obs.firm).to_string(),
                obs.year.to_string(),
                assignments[i].0.to_string(),
                assignments[i].1.to_string(),
            ]);
        }
        artifacts.extend(cells_table.write(out)?);

        // Cross-fitted wage models on the training panel.
        let plan = make_fold_plan(&train, config.pipeline.b, config.stage_seed("folds"))?;
        artifacts.push(write_json(out, "fold_plan.json", &plan.to_artifact(&train))?);
        let train_rows = train.all_rows();
        let features = model_matrix(&train, &train_rows, &pair)?;
        let targets = train.wages(&train_rows);
        let groups: Vec<u32> = train.rows().iter().map(|o| o.worker.0).collect();
        let reg = registry(config);
        let learner = reg.get(&config.pipeline.model)?;
        let crossfit = crossfit_predict(
            &features,
            &targets,
            Some(&groups),
            &plan.row_cell,
            config.pipeline.b,
            learner,
        )?;
        let oof_risk = blocked_risk(&crossfit.oof, &targets, &plan.row_cell, config.pipeline.b);
        let fold_models: Vec<serde_json::Value> = crossfit
            .models
            .iter()
            .map(|cell| {
                let model = cell.model.to_json().ok_or_else(|| {
                    CliError::Runtime(format!(
                        "learner `{}` does not serialize",
                        config.pipeline.model
                    ))
                })?;
                Ok(json!({
                    "worker_block": cell.worker_block,
                    "firm_block": cell.firm_block,
                    "n_train": cell.n_train,
                    "n_test": cell.n_test,
                    "learner": config.pipeline.model,
                    "model": model,
                }))
            })
            .collect::<Result<_, CliError>>()?;
        artifacts.push(write_json(
            out,
            "fold_models.json",
            &json!({ "b": config.pipeline.b, "models": fold_models }),
        )?);

        // Final model on all training rows.
        let final_model = learner.fit(&TrainSet {
            features: &features,
            targets: &targets,
            groups: Some(&groups),
            validation: None,
        })?;
        let model_json = final_model.to_json().ok_or_else(|| {
            CliError::Runtime(format!("learner `{}` does not serialize", config.pipeline.model))
        })?;
        artifacts.push(write_json(
            out,
            "wage_model.json",
            &json!({ "learner": config.pipeline.model, "model": model_json }),
        )?);

        // Holdout metrics.
        let holdout_rows = holdout.all_rows();
        let holdout_features = model_matrix(&holdout, &holdout_rows, &pair)?;
        let holdout_targets = holdout.wages(&holdout_rows);
        let train_preds = final_model.predict(&features)?;
        let holdout_preds = final_model.predict(&holdout_features)?;
        let mse = |preds: &[f64], actual: &[f64]| -> f64 {
            preds
                .iter()
                .zip(actual)
                .map(|(p, a)| (p - a) * (p - a))
                .sum::<f64>()
                / actual.len() as f64
        };
        let mut metrics = Table::new(
            "metrics",
            vec![
                ("model", ColType::Str),
                ("train_mse", ColType::Float),
                ("train_r2", ColType::Float),
                ("test_mse", ColType::Float),
                ("test_r2", ColType::Float),
            ],
        );
        metrics.push(vec![
            "twice".to_string(),
            fmt_f(mse(&train_preds, &targets)),
            fmt_f(crate::model::r_squared(&train_preds, &targets)),
            fmt_f(mse(&holdout_preds, &holdout_targets)),
            fmt_f(crate::model::r_squared(&holdout_preds, &holdout_targets)),
        ]);
        artifacts.extend(metrics.write(out)?);
        artifacts.push(write_json(
            out,
            "fit_report.json",
            &json!({
                "requested_k": k,
                "requested_l": l,
                "realized_k": pair.k,
                "realized_l": pair.l,
                "b": config.pipeline.b,
                "oof_loss": oof_risk.loss,
                "oof_cells_used": oof_risk.cells_used,
                "fold_cells_skipped": crossfit.cells_skipped,
                "n_train_rows": train.n_rows(),
                "n_holdout_rows": holdout.n_rows(),
            }),
        )?);
        Ok(artifacts)
    })
}

fn cmd_decompose(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    run_stage(config, out, "decompose", || {
        RunManifest::load_or_new(out, config).require("fit", out)?;
        let connected = connected_panel(config, out)?;
        let pair: PartitionPair = read_json(out, "partition.json")?;
        let rows = connected.all_rows();
        let assignments = assign_cells(&connected, &rows, &pair)?;
        let stats = cell_stats(&connected, &rows, &assignments)?;
        let effects = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER)?;
        let decomposition = decompose_variance(&connected, &rows, &assignments, &stats, &effects)?;
        let matrix = sorting_matrix(&assignments, &effects);

        let mut artifacts = Vec::new();
        artifacts.push(write_json(
            out,
            "decomposition.json",
            &json!({
                "k": pair.k,
                "l": pair.l,
                "grand_mean": stats.grand_mean,
                "n_rows": stats.n_rows,
                "total_variance": decomposition.total_variance,
                "components": decomposition.components,
                "shares": decomposition.shares,
                "closure_gap": decomposition.closure_gap,
                "effects": effects,
            }),
        )?);

        let mut columns = vec![("worker_cell", ColType::Int)];
        let firm_headers: Vec<String> =
            matrix.firm_cells.iter().map(|k| format!("firm_{k}")).collect();
        for header in &firm_headers {
            // Column names must outlive the table; leak the tiny strings.
            columns.push((Box::leak(header.clone().into_boxed_str()) as &'static str, ColType::Float));
        }
        let mut table = Table::new("sorting_matrix", columns);
        for (row_idx, &wc) in matrix.worker_cells.iter().enumerate() {
            let mut row = vec![wc.to_string()];
            row.extend(matrix.shares[row_idx].iter().map(|&v| fmt_f(v)));
            table.push(row);
        }
        artifacts.extend(table.write(out)?);
        Ok(artifacts)
    })
}

fn cmd_akm(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    run_stage(config, out, "akm", || {
        RunManifest::load_or_new(out, config).require("fit", out)?;
        let connected = connected_panel(config, out)?;
        let rows = connected.all_rows();
        let controls = config.akm.controls();
        let model = fit_akm(&connected, &rows, &controls)?;
        let decomposition = akm_decomposition(&model, &connected, &rows)?;

        let mut artifacts = Vec::new();
        let mut worker_table =
            Table::new("akm_worker_effects", vec![("worker_id", ColType::Str), ("theta", ColType::Float)]);
        for (&key, &theta) in &model.theta {
            worker_table
                .push(vec![connected.worker_id(crate::panel::WorkerKey(key)).to_string(), fmt_f(theta)]);
        }
        artifacts.extend(worker_table.write(out)?);
        let mut firm_table =
            Table::new("akm_firm_effects", vec![("firm_id", ColType::Str), ("psi", ColType::Float)]);
        for (&key, &psi) in &model.psi {
            firm_table
                .push(vec![connected.firm_id(crate::panel::FirmKey(key)).to_string(), fmt_f(psi)]);
        }
        artifacts.extend(firm_table.write(out)?);
        artifacts.push(write_json(
            out,
            "akm_decomposition.json",
            &json!({
                "decomposition": decomposition,
                "intercept": model.intercept,
                "beta": model.beta,
                "control_names": model.control_names,
                "pinned_firm": connected.firm_id(crate::panel::FirmKey(model.pinned_firm)),
                "cg_iterations": model.cg_iterations,
                "cg_residual": model.cg_residual,
            }),
        )?);

        // Concordance between fixed effects and the tree partitions.
        let pair: PartitionPair = read_json(out, "partition.json")?;
        let assignments = assign_cells(&connected, &rows, &pair)?;
        // Worker side: one observation per worker, classed by its modal
        // worker cell (ties to the smaller cell id).
        let mut per_worker: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
        for (i, &r) in rows.iter().enumerate() {
            let worker = connected.rows()[r].worker.0;
            *per_worker.entry(worker).or_default().entry(assignments[i].0).or_insert(0) += 1;
        }
        let mut worker_effects = Vec::with_capacity(per_worker.len());
        let mut worker_classes = Vec::with_capacity(per_worker.len());
        for (&worker, cells) in &per_worker {
            let (&modal, _) = cells
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("worker has rows");
            worker_effects.push(model.theta[&worker]);
            worker_classes.push(modal);
        }
        let worker_weights = vec![1.0; worker_effects.len()];
        let eta_worker = eta_squared(&worker_effects, &worker_classes, &worker_weights)?;
        // Firm side: one observation per firm-year, weighted by rows.
        let mut per_firm_year: BTreeMap<(u32, i32), (u32, f64)> = BTreeMap::new();
        for (i, &r) in rows.iter().enumerate() {
            let obs = &connected.rows()[r];
            let entry = per_firm_year.entry((obs.firm.0, obs.year)).or_insert((assignments[i].1, 0.0));
            entry.1 += 1.0;
        }
        let mut firm_effects = Vec::with_capacity(per_firm_year.len());
        let mut firm_classes = Vec::with_capacity(per_firm_year.len());
        let mut firm_weights = Vec::with_capacity(per_firm_year.len());
        for (&(firm, _year), &(cell, weight)) in &per_firm_year {
            firm_effects.push(model.psi[&firm]);
            firm_classes.push(cell);
            firm_weights.push(weight);
        }
        let eta_firm = eta_squared(&firm_effects, &firm_classes, &firm_weights)?;
        artifacts.push(write_json(
            out,
            "eta.json",
            &json!({ "worker": eta_worker, "firm": eta_firm }),
        )?);

        // OLS baselines on the same train/holdout split as the fit stage.
        let (train, holdout) = train_holdout(config, &connected)?;
        let train_rows = match_rows(&connected, &train);
        let test_rows = match_rows(&connected, &holdout);
        let baselines =
            fit_ols_baselines(&connected, &train_rows, &test_rows, &config.akm.ols_degrees)?;
        let mut table = Table::new(
            "ols_baselines",
            vec![
                ("model", ColType::Str),
                ("degree", ColType::Int),
                ("train_mse", ColType::Float),
                ("train_r2", ColType::Float),
                ("test_mse", ColType::Float),
                ("test_r2", ColType::Float),
            ],
        );
        for b in &baselines {
            table.push(vec![
                b.label.clone(),
                b.degree.to_string(),
                fmt_f(b.train_mse),
                fmt_f(b.train_r2),
                fmt_f(b.test_mse),
                fmt_f(b.test_r2),
            ]);
        }
        artifacts.extend(table.write(out)?);
        Ok(artifacts)
    })
}

fn cmd_explain(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    run_stage(config, out, "explain", || {
        RunManifest::load_or_new(out, config).require("fit", out)?;
        let connected = connected_panel(config, out)?;
        let (train, _) = train_holdout(config, &connected)?;
        let pair: PartitionPair = read_json(out, "partition.json")?;
        let train_rows = train.all_rows();
        let features = model_matrix(&train, &train_rows, &pair)?;

        // Curves average over the cross-fitted fold models.
        #[derive(Deserialize)]
        struct FoldModelsFile {
            models: Vec<FoldModelEntry>,
        }
        #[derive(Deserialize)]
        struct FoldModelEntry {
            learner: String,
            model: serde_json::Value,
        }
        let fold_file: FoldModelsFile = read_json(out, "fold_models.json")?;
        let mut models: Vec<Box<dyn Fitted>> = Vec::with_capacity(fold_file.models.len());
        for entry in fold_file.models {
            models.push(fitted_from_json(&entry.learner, entry.model)?);
        }
        if models.is_empty() {
            return Err(CliError::Runtime("fold_models.json lists no models".to_string()));
        }
        let model_refs: Vec<&dyn Fitted> = models.iter().map(|m| m.as_ref()).collect();

        let feature_names: Vec<String> = if config.explain.features.is_empty() {
            config.column_schema().columns.iter().map(|c| c.name.clone()).collect()
        } else {
            config.explain.features.clone()
        };
        let mut curves = Table::new(
            "curves",
            vec![
                ("grid", ColType::Float),
                ("value", ColType::Float),
                ("support", ColType::Int),
                ("variant", ColType::Str),
                ("feature", ColType::Str),
                ("axis_hint", ColType::Str),
            ],
        );
        let mut push_curve = |curve: &crate::explain::Curve| {
            let hint = curve.axis_hint.clone().unwrap_or_default();
            for i in 0..curve.grid.len() {
                curves.push(vec![
                    fmt_f(curve.grid[i]),
                    fmt_f(curve.values[i]),
                    curve.support[i].to_string(),
                    curve.variant.clone(),
                    curve.feature.clone(),
                    hint.clone(),
                ]);
            }
        };
        for name in &feature_names {
            let (_, column) = features.column_by_name(name).map_err(ExplainError::Data)?;
            let mut spec = CurveSpec::full(name);
            spec.grid_points = config.explain.grid_points;
            spec.trim = (config.explain.trim[0], config.explain.trim[1]);
            if config.explain.log_axis.contains(name) {
                spec.axis_hint = Some("log".to_string());
            }
            push_curve(&pdp(&model_refs, &features, &spec)?);
            if matches!(column, crate::data::FeatureColumn::Numeric(_)) {
                push_curve(&ale(&model_refs, &features, &spec)?);
            }
        }
        let mut artifacts = curves.write(out)?;

        // Importance from the final boosted model's split gains.
        let mut importance = Table::new(
            "importance",
            vec![("feature", ColType::Str), ("gain", ColType::Float)],
        );
        #[derive(Deserialize)]
        struct WageModelFile {
            learner: String,
            model: serde_json::Value,
        }
        let wage_file: WageModelFile = read_json(out, "wage_model.json")?;
        if wage_file.learner == "boosted" {
            let ensemble: BoostedEnsemble = serde_json::from_value(wage_file.model)?;
            let gains = ensemble.importance();
            let mut ranked: Vec<(String, f64)> = ensemble
                .schema
                .features
                .iter()
                .map(|f| f.name.clone())
                .zip(gains)
                .collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite gains").then(a.0.cmp(&b.0)));
            for (name, gain) in ranked {
                importance.push(vec![name, fmt_f(gain)]);
            }
        }
        artifacts.extend(importance.write(out)?);
        Ok(artifacts)
    })
}

fn cmd_eventstudy(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    run_stage(config, out, "eventstudy", || {
        let connected = connected_panel(config, out)?;
        let study = event_study(&connected, config.eventstudy.min_spell)?;
        let mut table = Table::new(
            "event_study",
            vec![
                ("origin_q", ColType::Int),
                ("dest_q", ColType::Int),
                ("event_time", ColType::Int),
                ("mean_log_wage", ColType::Float),
                ("n", ColType::Int),
            ],
        );
        for cell in &study.cells {
            table.push(vec![
                cell.origin_q.to_string(),
                cell.dest_q.to_string(),
                cell.event_time.to_string(),
                fmt_f(cell.mean_log_wage),
                cell.n.to_string(),
            ]);
        }
        let mut artifacts = table.write(out)?;
        artifacts.push(write_json(
            out,
            "event_study.json",
            &json!({
                "movers": study.movers,
                "min_spell": study.min_spell,
                "insufficient": study.insufficient,
            }),
        )?);
        Ok(artifacts)
    })
}

fn cmd_robustness(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    run_stage(config, out, "robustness", || {
        RunManifest::load_or_new(out, config).require("fit", out)?;
        let connected = connected_panel(config, out)?;
        let (train, _) = train_holdout(config, &connected)?;
        let baseline: PartitionPair = read_json(out, "partition.json")?;
        let rows = connected.all_rows();
        let train_rows = train.all_rows();

        // Hold the worker partition fixed; retrain the firm partition with
        // the same leaf budget under each alternative target.
        let targets = [
            ("mean", crate::partition::FirmTarget::Mean),
            ("median", crate::partition::FirmTarget::Median),
            (
                "residual",
                crate::partition::FirmTarget::Residual {
                    blocks: config.firm_target.residual_blocks,
                    seed: config.stage_seed("firm-target"),
                    boost: config.boost.clone(),
                },
            ),
        ];
        let mut shares_table = Table::new(
            "robustness_shares",
            vec![
                ("specification", ColType::Str),
                ("worker", ColType::Float),
                ("firm", ColType::Float),
                ("sorting", ColType::Float),
                ("interaction", ColType::Float),
                ("residual", ColType::Float),
            ],
        );
        // ψ per firm-year under each specification, keyed for rank
        // comparison across specifications.
        let mut psi_by_spec: Vec<Vec<f64>> = Vec::with_capacity(targets.len());
        let firm_years: Vec<(u32, i32)> = {
            let mut seen: Vec<(u32, i32)> =
                connected.rows().iter().map(|o| (o.firm.0, o.year)).collect();
            seen.sort_unstable();
            seen.dedup();
            seen
        };
        for (label, target) in &targets {
            let firm_tree =
                build_firm_partition(&train, &train_rows, baseline.k, target, &config.tree)?;
            let pair = PartitionPair::new(firm_tree, baseline.worker_tree.clone());
            let assignments = assign_cells(&connected, &rows, &pair)?;
            let stats = cell_stats(&connected, &rows, &assignments)?;
            let effects = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER)?;
            let decomposition =
                decompose_variance(&connected, &rows, &assignments, &stats, &effects)?;
            let s = &decomposition.shares;
            shares_table.push(vec![
                label.to_string(),
                fmt_f(s.worker),
                fmt_f(s.firm),
                fmt_f(s.sorting),
                fmt_f(s.interaction),
                fmt_f(s.residual),
            ]);
            let mut cell_of: BTreeMap<(u32, i32), u32> = BTreeMap::new();
            for (i, &r) in rows.iter().enumerate() {
                let obs = &connected.rows()[r];
                cell_of.insert((obs.firm.0, obs.year), assignments[i].1);
            }
            psi_by_spec.push(
                firm_years.iter().map(|key| effects.psi[cell_of[key] as usize - 1]).collect(),
            );
        }
        let mut artifacts = shares_table.write(out)?;

        let mut spearman_table = Table::new(
            "robustness_spearman",
            vec![
                ("comparison", ColType::Str),
                ("spearman", ColType::Float),
                ("n_firm_years", ColType::Int),
            ],
        );
        for (other_idx, name) in [(1, "mean_vs_median"), (2, "mean_vs_residual")] {
            let rho = spearman(&psi_by_spec[0], &psi_by_spec[other_idx])?;
            spearman_table.push(vec![
                name.to_string(),
                fmt_f(rho),
                firm_years.len().to_string(),
            ]);
        }
        artifacts.extend(spearman_table.write(out)?);
        Ok(artifacts)
    })
}

// ---------------------------------------------------------------------------
// entry points

#[derive(Debug, Parser)]
#[command(
    name = "twice",
    version,
    about = "Tree-based two-way wage decomposition pipeline",
    subcommand_required = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandName,
    /// Run configuration TOML.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the configured one).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed (overrides the configured one).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Log errors only.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Emit logs as JSON lines.
    #[arg(long = "json-logs", global = true)]
    pub json_logs: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum CommandName {
    /// Generate a synthetic panel and its ground truth.
    Simulate,
    /// Restrict the panel to its largest connected component.
    Connect,
    /// Grid-search cell counts under blocked cross-fitting.
    Tune,
    /// Build partitions, cross-fitted models, and holdout metrics.
    Fit,
    /// Project cell means into effects and variance shares.
    Decompose,
    /// Fixed-effects benchmark, concordance, and OLS baselines.
    Akm,
    /// Feature curves and variable importance.
    Explain,
    /// Wage trajectories around firm-to-firm moves.
    Eventstudy,
    /// Decomposition under alternative firm targets.
    Robustness,
}

impl CommandName {
    fn run(self, config: &RunConfig, out: &Path) -> Result<(), CliError> {
        match self {
            CommandName::Simulate => cmd_simulate(config, out),
            CommandName::Connect => cmd_connect(config, out),
            CommandName::Tune => cmd_tune(config, out),
            CommandName::Fit => cmd_fit(config, out),
            CommandName::Decompose => cmd_decompose(config, out),
            CommandName::Akm => cmd_akm(config, out),
            CommandName::Explain => cmd_explain(config, out),
            CommandName::Eventstudy => cmd_eventstudy(config, out),
            CommandName::Robustness => cmd_robustness(config, out),
        }
    }
}

/// Parses the configuration, applies CLI overrides, and runs the command.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| invalid("config", "pass --config <file>"))?;
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.pipeline.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output.dir = out.clone();
    }
    config.validate()?;
    let out = config.output.dir.clone();
    fs::create_dir_all(&out)?;
    cli.command.run(&config, &out)
}

fn init_logging(quiet: bool, json_logs: bool) {
    let level = if quiet { "error" } else { "info" };
    let mut builder =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level));
    if json_logs {
        builder.format(|buf, record| {
            let line = json!({
                "level": record.level().to_string().to_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = builder.try_init();
}

fn init_threads() {
    if let Ok(value) = std::env::var("TWICE_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
        }
    }
}

/// Full CLI entry: returns the process exit code (0 success, 1 validation
/// error, 2 runtime error).
pub fn run(cli: Cli) -> i32 {
    init_logging(cli.quiet, cli.json_logs);
    init_threads();
    match execute(&cli) {
        Ok(()) => 0,
        Err(err) => {
            log::error!("{err}");
            err.exit_code()
        }
    }
}
