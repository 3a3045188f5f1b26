//! Run configuration: the TOML file behind every pipeline command.
//!
//! A [`RunConfig`] names the panel source (a CSV with column declarations or
//! a synthetic generator spec), the output directory, and the knobs of every
//! stage. One master seed drives the whole pipeline; each stochastic stage
//! derives its own seed from the master and the stage name, so stages can be
//! rerun independently without coupling their random streams. A stable
//! content hash of the parsed configuration is recorded in the run manifest
//! and lets downstream commands detect artifacts produced under different
//! settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::akm::ControlsConfig;
use crate::boost::BoostConfig;
use crate::data::{ColumnKind, ColumnSchema, ColumnSpec};
use crate::partition::{FirmTarget, PartitionConfig};
use crate::synth::SyntheticSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config key `{key}`: {reason}")]
    ConfigInvalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::ConfigInvalid { key: key.to_string(), reason: reason.into() }
}

/// Panel source: exactly one of `csv` (with column declarations) or
/// `synthetic` must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Path to a panel CSV with header `worker_id,firm_id,year,log_wage`
    /// followed by the declared covariate columns, in order.
    pub csv: Option<PathBuf>,
    /// Generator spec for synthetic panels; these carry a built-in schema.
    pub synthetic: Option<SyntheticSpec>,
    /// Covariate declarations for CSV inputs.
    #[serde(default)]
    pub columns: Vec<ColumnSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory receiving every artifact, created on demand.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("twice-out") }
    }
}

/// Core pipeline knobs: seeding, fold blocks, cell-count grid, learner, and
/// the firm-level holdout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Blocks per side for two-way ID-blocked cross-fitting (B² cells).
    pub b: usize,
    /// Candidate firm cell counts for tuning.
    pub k_grid: Vec<usize>,
    /// Candidate worker cell counts for tuning.
    pub l_grid: Vec<usize>,
    /// Explicit firm cell count; set together with `l` to skip tuning.
    pub k: Option<usize>,
    /// Explicit worker cell count; set together with `k` to skip tuning.
    pub l: Option<usize>,
    /// Learner fit within each fold complement and for the final model.
    pub model: String,
    /// Share of firms moved to the holdout sample.
    pub holdout_firm_fraction: f64,
    /// Share of the held-out firms' workers kept in the holdout sample.
    pub holdout_worker_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            b: 5,
            k_grid: vec![2, 4, 8, 16],
            l_grid: vec![2, 4, 8, 16],
            k: None,
            l: None,
            model: "boosted".to_string(),
            holdout_firm_fraction: 0.10,
            holdout_worker_fraction: 1.0,
        }
    }
}

/// Which firm-year wage summary the firm tree predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirmTargetKind {
    Mean,
    Median,
    /// Firm-year mean of cross-fitted worker-only model residuals.
    Residual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirmTargetConfig {
    pub kind: FirmTargetKind,
    /// Worker blocks for the residual target's cross-fit.
    pub residual_blocks: usize,
}

impl Default for FirmTargetConfig {
    fn default() -> Self {
        Self { kind: FirmTargetKind::Mean, residual_blocks: 5 }
    }
}

impl FirmTargetConfig {
    /// Materializes the partition-module target, seeding the residual
    /// cross-fit from the given stage seed.
    pub fn build(&self, seed: u64, boost: &BoostConfig) -> FirmTarget {
        match self.kind {
            FirmTargetKind::Mean => FirmTarget::Mean,
            FirmTargetKind::Median => FirmTarget::Median,
            FirmTargetKind::Residual => FirmTarget::Residual {
                blocks: self.residual_blocks,
                seed,
                boost: boost.clone(),
            },
        }
    }
}

/// Controls and baselines for the fixed-effects benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AkmConfig {
    /// Age column for the polynomial-in-age controls; defaults to `age` when
    /// present.
    pub age_column: Option<String>,
    /// Highest age power; powers 2..=degree enter (the linear term is
    /// absorbed by worker and year effects).
    pub age_degree: usize,
    pub year_effects: bool,
    /// OLS baseline degrees; 0 is the intercept-plus-age-profile model.
    pub ols_degrees: Vec<usize>,
}

impl Default for AkmConfig {
    fn default() -> Self {
        Self { age_column: None, age_degree: 3, year_effects: true, ols_degrees: vec![0, 1, 3] }
    }
}

impl AkmConfig {
    pub fn controls(&self) -> ControlsConfig {
        ControlsConfig {
            age_column: self.age_column.clone(),
            age_degree: self.age_degree,
            year_effects: self.year_effects,
        }
    }
}

/// Feature-effect reporting: which features get curves and how the grids are
/// built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Features to plot; empty means every covariate column.
    pub features: Vec<String>,
    pub grid_points: usize,
    /// Quantile window the grids span.
    pub trim: [f64; 2],
    /// Features whose curves should be read on a log axis.
    pub log_axis: Vec<String>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            features: Vec::new(),
            grid_points: 40,
            trim: [0.10, 0.90],
            log_axis: vec!["tenure".to_string()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventStudyConfig {
    /// Consecutive years required at the origin and destination firm.
    pub min_spell: usize,
}

impl Default for EventStudyConfig {
    fn default() -> Self {
        Self { min_spell: 2 }
    }
}

/// Everything a pipeline run needs, parsed from one TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Tree-shape options shared by the worker and firm partitions.
    #[serde(default)]
    pub tree: PartitionConfig,
    #[serde(default)]
    pub boost: BoostConfig,
    #[serde(default)]
    pub firm_target: FirmTargetConfig,
    #[serde(default)]
    pub akm: AkmConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub eventstudy: EventStudyConfig,
}

/// Column names reserved for the panel's core fields.
const RESERVED_COLUMNS: [&str; 4] = ["worker_id", "firm_id", "year", "log_wage"];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.input.csv, &self.input.synthetic) {
            (Some(_), Some(_)) => {
                return Err(invalid("input", "declare either csv or synthetic, not both"))
            }
            (None, None) => return Err(invalid("input", "declare a csv path or a synthetic spec")),
            _ => {}
        }
        if self.input.csv.is_some() {
            if self.input.columns.is_empty() {
                return Err(invalid("input.columns", "CSV inputs need column declarations"));
            }
        } else if !self.input.columns.is_empty() {
            return Err(invalid("input.columns", "synthetic panels carry a built-in schema"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for col in &self.input.columns {
            if col.name.is_empty() {
                return Err(invalid("input.columns", "column names must be non-empty"));
            }
            if RESERVED_COLUMNS.contains(&col.name.as_str()) {
                return Err(invalid(
                    "input.columns",
                    format!("`{}` is a reserved core field", col.name),
                ));
            }
            if !seen.insert(col.name.clone()) {
                return Err(invalid("input.columns", format!("duplicate column `{}`", col.name)));
            }
            match col.kind {
                ColumnKind::Categorical => {
                    if col.cardinality.map_or(true, |c| c < 2) {
                        return Err(invalid(
                            "input.columns",
                            format!("categorical `{}` needs cardinality >= 2", col.name),
                        ));
                    }
                }
                ColumnKind::Numeric => {
                    if col.cardinality.is_some() {
                        return Err(invalid(
                            "input.columns",
                            format!("numeric `{}` takes no cardinality", col.name),
                        ));
                    }
                }
            }
        }

        let p = &self.pipeline;
        if !(2..=255).contains(&p.b) {
            return Err(invalid("pipeline.b", "block count must be in 2..=255"));
        }
        match (p.k, p.l) {
            (Some(k), Some(l)) => {
                if k == 0 || l == 0 {
                    return Err(invalid("pipeline.k", "explicit cell counts must be positive"));
                }
            }
            (None, None) => {
                if p.k_grid.is_empty() || p.l_grid.is_empty() {
                    return Err(invalid("pipeline.k_grid", "tuning grids must be non-empty"));
                }
                if p.k_grid.iter().chain(&p.l_grid).any(|&c| c == 0) {
                    return Err(invalid("pipeline.k_grid", "grid cell counts must be positive"));
                }
            }
            _ => return Err(invalid("pipeline.k", "set both k and l or neither")),
        }
        if p.model.is_empty() {
            return Err(invalid("pipeline.model", "learner name must be non-empty"));
        }
        if !(p.holdout_firm_fraction > 0.0 && p.holdout_firm_fraction < 1.0) {
            return Err(invalid(
                "pipeline.holdout_firm_fraction",
                "holdout firm fraction must be in (0, 1)",
            ));
        }
        if !(p.holdout_worker_fraction > 0.0 && p.holdout_worker_fraction <= 1.0) {
            return Err(invalid(
                "pipeline.holdout_worker_fraction",
                "holdout worker fraction must be in (0, 1]",
            ));
        }

        if self.firm_target.kind == FirmTargetKind::Residual
            && !(2..=255).contains(&self.firm_target.residual_blocks)
        {
            return Err(invalid(
                "firm_target.residual_blocks",
                "residual cross-fit blocks must be in 2..=255",
            ));
        }

        if self.akm.age_degree > 10 {
            return Err(invalid("akm.age_degree", "age polynomial degree above 10 is unstable"));
        }
        if self.akm.ols_degrees.iter().any(|&d| d > 10) {
            return Err(invalid("akm.ols_degrees", "baseline degrees above 10 are unstable"));
        }

        let e = &self.explain;
        if e.grid_points < 2 {
            return Err(invalid("explain.grid_points", "curves need at least 2 grid points"));
        }
        if !(e.trim[0] >= 0.0 && e.trim[0] < e.trim[1] && e.trim[1] <= 1.0) {
            return Err(invalid("explain.trim", "trim must satisfy 0 <= lower < upper <= 1"));
        }

        if self.eventstudy.min_spell == 0 {
            return Err(invalid("eventstudy.min_spell", "spell length must be positive"));
        }
        Ok(())
    }

    /// Covariate schema of the configured panel source.
    pub fn column_schema(&self) -> ColumnSchema {
        if self.input.synthetic.is_some() {
            crate::synth::synthetic_schema()
        } else {
            ColumnSchema::new(self.input.columns.clone())
        }
    }

    /// Derived seed for one named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.pipeline.seed, stage)
    }

    /// Tuning grid as (firm cells, worker cells) pairs, row-major over
    /// `k_grid` × `l_grid`.
    pub fn tuning_grid(&self) -> Vec<(usize, usize)> {
        let mut grid = Vec::with_capacity(self.pipeline.k_grid.len() * self.pipeline.l_grid.len());
        for &k in &self.pipeline.k_grid {
            for &l in &self.pipeline.l_grid {
                grid.push((k, l));
            }
        }
        grid
    }

    /// Stable content hash over the parsed configuration, as recorded in the
    /// run manifest.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for one stage: the stage name is hashed and mixed with the master
/// seed through a SplitMix64 finalizer, so distinct stages get decorrelated
/// streams while a fixed (master, stage) pair is fully reproducible.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut z = master ^ fnv1a(stage.as_bytes());
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
