//! Synthetic matched worker–firm panels with known decomposition truth.
//!
//! Workers and firms get latent standard-normal qualities; quantile buckets
//! of those latents define discrete types. Employer choice couples the two
//! latents through a Gaussian copula whose strength is `sorting_strength`,
//! so `0` yields independent matching and `±1` deterministic rank matching.
//! Wages are a cell-mean surface over the type pair — additive worker and
//! firm effects plus an optional interaction — and three mean-zero noise
//! layers: per worker, per firm, and per row. Covariates are noisy proxies
//! of the types so the partition stage has something genuine to recover.
//!
//! [`GroundTruth`] reports the additive projection of the systematic cell
//! means under the *realized* cell shares, which is exactly the estimand the
//! decomposition pipeline targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{ColumnSchema, ColumnSpec, Side, Value};
use crate::decompose::{
    project_additive, CellStats, DecomposeError, ProjectedEffects, VarianceComponents,
    PROJECTION_MAX_ITER, PROJECTION_TOL,
};
use crate::panel::{Panel, PanelBuilder, PanelError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
}

/// Generator parameters. Every draw is pinned by `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_workers: usize,
    pub n_firms: usize,
    pub n_years: usize,
    pub worker_type_count: usize,
    pub firm_type_count: usize,
    /// Copula correlation between worker and firm latents, in `[-1, 1]`.
    pub sorting_strength: f64,
    /// Multiplier on the worker-type × firm-type interaction surface.
    pub interaction_scale: f64,
    /// Standard deviation of the per-row idiosyncratic noise.
    pub noise_sd: f64,
    pub seed: u64,
    /// Standard deviation of a per-worker noise effect shared by all of the
    /// worker's rows (creates within-worker dependence; default 0).
    #[serde(default)]
    pub worker_noise_sd: f64,
    /// Per-firm analogue of `worker_noise_sd` (default 0).
    #[serde(default)]
    pub firm_noise_sd: f64,
    /// Probability of redrawing the employer in each year after the first;
    /// otherwise the worker stays put.
    #[serde(default = "default_move_rate")]
    pub move_rate: f64,
}

fn default_move_rate() -> f64 {
    0.25
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_workers: 1000,
            n_firms: 100,
            n_years: 3,
            worker_type_count: 4,
            firm_type_count: 4,
            sorting_strength: 0.0,
            interaction_scale: 0.0,
            noise_sd: 0.1,
            seed: 0,
            worker_noise_sd: 0.0,
            firm_noise_sd: 0.0,
            move_rate: default_move_rate(),
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::BadSpec(m.to_string()));
        if self.n_workers == 0 || self.n_firms == 0 || self.n_years == 0 {
            return bad("worker, firm, and year counts must be positive");
        }
        if self.worker_type_count == 0 || self.firm_type_count == 0 {
            return bad("type counts must be positive");
        }
        if !self.sorting_strength.is_finite() || self.sorting_strength.abs() > 1.0 {
            return bad("sorting_strength must lie in [-1, 1]");
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("worker_noise_sd", self.worker_noise_sd),
            ("firm_noise_sd", self.firm_noise_sd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SynthError::BadSpec(format!("{name} must be nonnegative")));
            }
        }
        if !self.interaction_scale.is_finite() {
            return bad("interaction_scale must be finite");
        }
        if !(0.0..=1.0).contains(&self.move_rate) {
            return bad("move_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// The generator's answer key. Effects and components come from projecting
/// the systematic cell means under the realized cell shares — the same
/// estimand the decomposition stage computes from data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub grand_mean: f64,
    /// Worker type (0-based) indexed by panel worker key, which equals the
    /// numeric suffix of the worker id.
    pub worker_types: Vec<u32>,
    /// Firm type (0-based) indexed by the numeric suffix of the firm id.
    pub firm_types: Vec<u32>,
    /// Systematic cell means and realized shares.
    pub stats: CellStats,
    pub effects: ProjectedEffects,
    pub components: VarianceComponents,
    pub shares: VarianceComponents,
    /// Realized noise per row (worker + firm + idiosyncratic), parallel to
    /// the panel's rows. Kept in memory only: it is the generator's secret,
    /// not part of the emitted answer key.
    #[serde(skip)]
    pub noise: Vec<f64>,
    /// True 1-based (worker_cell, firm_cell) per row, parallel to the
    /// panel's rows — ready for [`crate::decompose::cell_stats`].
    #[serde(skip)]
    pub row_cells: Vec<(u32, u32)>,
}

/// Equally spaced values on `[-scale, scale]`; a single type sits at zero.
fn type_effects(count: usize, scale: f64) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|i| scale * (2.0 * i as f64 - (count - 1) as f64) / (count - 1) as f64)
        .collect()
}

fn type_of(latent: f64, count: usize, normal: &Normal) -> usize {
    ((normal.cdf(latent) * count as f64) as usize).min(count - 1)
}

const WORKER_EFFECT_SCALE: f64 = 0.3;
const FIRM_EFFECT_SCALE: f64 = 0.2;
const BASE_WAGE: f64 = 2.0;

/// Column layout of generated panels, for re-ingesting emitted CSVs.
pub fn synthetic_schema() -> ColumnSchema {
    ColumnSchema::new(vec![
        ColumnSpec::numeric("age", Side::Worker),
        ColumnSpec::numeric("tenure", Side::Worker),
        ColumnSpec::categorical("education", Side::Worker, 3),
        ColumnSpec::numeric("w_noise", Side::Worker),
        ColumnSpec::numeric("log_size", Side::Firm),
        ColumnSpec::numeric("log_revpw", Side::Firm),
        ColumnSpec::categorical("sector", Side::Firm, 3),
        ColumnSpec::numeric("f_noise", Side::Firm),
    ])
}

/// Generates the panel and its answer key.
pub fn generate(spec: &SyntheticSpec) -> Result<(Panel, GroundTruth), SynthError> {
    spec.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.worker_type_count;
    let k = spec.firm_type_count;

    let a = type_effects(l, WORKER_EFFECT_SCALE);
    let b = type_effects(k, FIRM_EFFECT_SCALE);
    let ul = type_effects(l, 1.0);
    let uk = type_effects(k, 1.0);
    let cell_mean = |li: usize, ki: usize| {
        BASE_WAGE + a[li] + b[ki] + spec.interaction_scale * ul[li] * uk[ki]
    };

    // worker latents and time-invariant worker traits
    let mut worker_latent = Vec::with_capacity(spec.n_workers);
    let mut worker_type = Vec::with_capacity(spec.n_workers);
    let mut age_base = Vec::with_capacity(spec.n_workers);
    let mut education = Vec::with_capacity(spec.n_workers);
    let mut worker_noise = Vec::with_capacity(spec.n_workers);
    for _ in 0..spec.n_workers {
        let q: f64 = rng.sample(StandardNormal);
        let li = type_of(q, l, &normal);
        worker_latent.push(q);
        worker_type.push(li);
        age_base.push(24.0 + 6.0 * li as f64 + 1.2 * rng.sample::<f64, _>(StandardNormal));
        let edu_u: f64 = rng.gen();
        let edu = if edu_u < 0.1 {
            ((edu_u * 30.0) as u32).min(2)
        } else {
            ((li * 3) / l) as u32
        };
        education.push(edu);
        worker_noise.push(spec.worker_noise_sd * rng.sample::<f64, _>(StandardNormal));
    }

    // firm latents and time-invariant firm traits
    let mut firm_latent = Vec::with_capacity(spec.n_firms);
    let mut firm_type = Vec::with_capacity(spec.n_firms);
    let mut sector = Vec::with_capacity(spec.n_firms);
    let mut firm_noise = Vec::with_capacity(spec.n_firms);
    for _ in 0..spec.n_firms {
        let p: f64 = rng.sample(StandardNormal);
        let ki = type_of(p, k, &normal);
        firm_latent.push(p);
        firm_type.push(ki);
        let sec_u: f64 = rng.gen();
        let sec = if sec_u < 0.1 { ((sec_u * 30.0) as u32).min(2) } else { (ki % 3) as u32 };
        sector.push(sec);
        firm_noise.push(spec.firm_noise_sd * rng.sample::<f64, _>(StandardNormal));
    }
    // rank r holds the index of the r-th lowest-quality firm
    let mut firm_rank: Vec<usize> = (0..spec.n_firms).collect();
    firm_rank.sort_by(|&x, &y| {
        firm_latent[x].partial_cmp(&firm_latent[y]).expect("finite latents").then(x.cmp(&y))
    });

    // firm-year covariates, constant across a firm-year's rows
    let mut log_size = vec![0.0f64; spec.n_firms * spec.n_years];
    let mut log_revpw = vec![0.0f64; spec.n_firms * spec.n_years];
    let mut f_noise_col = vec![0.0f64; spec.n_firms * spec.n_years];
    for j in 0..spec.n_firms {
        for t in 0..spec.n_years {
            let idx = j * spec.n_years + t;
            log_size[idx] =
                1.5 + 0.8 * firm_type[j] as f64 + 0.3 * rng.sample::<f64, _>(StandardNormal);
            log_revpw[idx] = 2.0
                + 0.5 * firm_type[j] as f64
                + 0.4 * rng.sample::<f64, _>(StandardNormal).asinh();
            f_noise_col[idx] = rng.sample(StandardNormal);
        }
    }

    let mut builder = PanelBuilder::new(synthetic_schema());
    let edu_codes: Vec<u32> = ["primary", "secondary", "tertiary"]
        .iter()
        .map(|name| builder.intern_level(2, name).expect("worker dictionary"))
        .collect();
    let sector_codes: Vec<u32> = ["manufacturing", "services", "trade"]
        .iter()
        .map(|name| builder.intern_level(6, name).expect("firm dictionary"))
        .collect();

    let rho = spec.sorting_strength;
    let draw_firm = |rng: &mut ChaCha8Rng, q: f64| -> usize {
        let rank = if rho == 0.0 {
            rng.gen_range(0..spec.n_firms)
        } else {
            let m = if rho.abs() == 1.0 {
                rho * q
            } else {
                rho * q + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal)
            };
            ((normal.cdf(m) * spec.n_firms as f64) as usize).min(spec.n_firms - 1)
        };
        firm_rank[rank]
    };

    let n_rows = spec.n_workers * spec.n_years;
    let mut noise = Vec::with_capacity(n_rows);
    let mut row_cells = Vec::with_capacity(n_rows);
    for i in 0..spec.n_workers {
        let li = worker_type[i];
        let mut firm = usize::MAX;
        for t in 0..spec.n_years {
            if t == 0 || rng.gen::<f64>() < spec.move_rate {
                firm = draw_firm(&mut rng, worker_latent[i]);
            }
            let ki = firm_type[firm];
            let tenure =
                (0.35 * li as f64 + 0.18 * rng.sample::<f64, _>(StandardNormal)).exp();
            let w_noise: f64 = rng.sample(StandardNormal);
            let eps = spec.noise_sd * rng.sample::<f64, _>(StandardNormal);
            let u = worker_noise[i] + firm_noise[firm] + eps;
            let wage = cell_mean(li, ki) + u;
            let fy = firm * spec.n_years + t;
            builder.push_row(
                &format!("w{i:06}"),
                &format!("f{firm:05}"),
                2000 + t as i32,
                wage,
                vec![
                    Value::Numeric(age_base[i] + t as f64),
                    Value::Numeric(tenure),
                    Value::Categorical(edu_codes[education[i] as usize]),
                    Value::Numeric(w_noise),
                    Value::Numeric(log_size[fy]),
                    Value::Numeric(log_revpw[fy]),
                    Value::Categorical(sector_codes[sector[firm] as usize]),
                    Value::Numeric(f_noise_col[fy]),
                ],
            )?;
            noise.push(u);
            row_cells.push((li as u32 + 1, ki as u32 + 1));
        }
    }
    let panel = builder.finish()?;

    // answer key: project the systematic surface under realized shares
    let mut shares = vec![vec![0.0f64; k]; l];
    for &(wc, fc) in &row_cells {
        shares[wc as usize - 1][fc as usize - 1] += 1.0;
    }
    let means: Vec<Vec<f64>> =
        (0..l).map(|li| (0..k).map(|ki| cell_mean(li, ki)).collect()).collect();
    let stats = CellStats::from_matrices(&shares, &means)?;
    let effects = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER)?;
    let mut worker_var = 0.0;
    let mut firm_var = 0.0;
    let mut sorting = 0.0;
    let mut interaction = 0.0;
    for (idx, cell) in stats.cells.iter().enumerate() {
        let alpha = effects.alpha[cell.worker_cell as usize - 1];
        let psi = effects.psi[cell.firm_cell as usize - 1];
        let kappa = effects.kappa[idx];
        worker_var += cell.share * alpha * alpha;
        firm_var += cell.share * psi * psi;
        sorting += 2.0 * cell.share * alpha * psi;
        interaction += cell.share * kappa * kappa;
    }
    let residual = spec.noise_sd * spec.noise_sd
        + spec.worker_noise_sd * spec.worker_noise_sd
        + spec.firm_noise_sd * spec.firm_noise_sd;
    let components =
        VarianceComponents { worker: worker_var, firm: firm_var, sorting, interaction, residual };
    let total = components.sum();
    let shares_out = if total > 0.0 {
        VarianceComponents {
            worker: worker_var / total,
            firm: firm_var / total,
            sorting: sorting / total,
            interaction: interaction / total,
            residual: residual / total,
        }
    } else {
        VarianceComponents { worker: 0.0, firm: 0.0, sorting: 0.0, interaction: 0.0, residual: 0.0 }
    };

    let truth = GroundTruth {
        grand_mean: stats.grand_mean,
        worker_types: worker_type.iter().map(|&t| t as u32).collect(),
        firm_types: firm_type.iter().map(|&t| t as u32).collect(),
        stats,
        effects,
        components,
        shares: shares_out,
        noise,
        row_cells,
    };
    Ok((panel, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::akm::spearman;
    use crate::decompose::{cell_stats, decompose_variance};
    use std::collections::BTreeMap;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_workers: 300,
            n_firms: 40,
            n_years: 3,
            sorting_strength: 0.5,
            interaction_scale: 0.4,
            noise_sd: 0.05,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (p1, g1) = generate(&small(7)).unwrap();
        let (p2, g2) = generate(&small(7)).unwrap();
        assert_eq!(p1.rows().len(), p2.rows().len());
        for (r1, r2) in p1.rows().iter().zip(p2.rows()) {
            assert_eq!(r1.log_wage.to_bits(), r2.log_wage.to_bits());
            assert_eq!(r1.year, r2.year);
            assert_eq!(p1.worker_id(r1.worker), p2.worker_id(r2.worker));
            assert_eq!(p1.firm_id(r1.firm), p2.firm_id(r2.firm));
        }
        for (n1, n2) in g1.noise.iter().zip(&g2.noise) {
            assert_eq!(n1.to_bits(), n2.to_bits());
        }
        let (p3, _) = generate(&small(8)).unwrap();
        assert!(p1
            .rows()
            .iter()
            .zip(p3.rows())
            .any(|(r1, r3)| r1.log_wage.to_bits() != r3.log_wage.to_bits()));
    }

    #[test]
    fn panel_is_balanced_and_within_bounds() {
        let spec = small(3);
        let (panel, truth) = generate(&spec).unwrap();
        assert_eq!(panel.rows().len(), spec.n_workers * spec.n_years);
        assert_eq!(truth.noise.len(), panel.rows().len());
        assert_eq!(truth.row_cells.len(), panel.rows().len());
        assert_eq!(truth.worker_types.len(), spec.n_workers);
        assert_eq!(truth.firm_types.len(), spec.n_firms);
        let mut per_worker: BTreeMap<u32, usize> = BTreeMap::new();
        for r in panel.rows() {
            *per_worker.entry(r.worker.0).or_insert(0) += 1;
            assert!((2000..2000 + spec.n_years as i32).contains(&r.year));
        }
        assert_eq!(per_worker.len(), spec.n_workers);
        assert!(per_worker.values().all(|&n| n == spec.n_years));
    }

    #[test]
    fn wages_decompose_into_cell_mean_plus_stored_noise() {
        let (panel, truth) = generate(&small(11)).unwrap();
        let index = truth.stats.index();
        for (i, r) in panel.rows().iter().enumerate() {
            let cell = truth.row_cells[i];
            let mean = truth.stats.cells[index[&cell]].mean;
            assert!((r.log_wage - mean - truth.noise[i]).abs() < 1e-12, "row {i}");
        }
    }

    #[test]
    fn perfect_sorting_locks_each_worker_to_one_firm() {
        let spec = SyntheticSpec {
            n_workers: 400,
            n_firms: 50,
            sorting_strength: 1.0,
            move_rate: 1.0,
            ..SyntheticSpec::default()
        };
        let (panel, truth) = generate(&spec).unwrap();
        let mut firms_of: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
        for r in panel.rows() {
            firms_of.entry(r.worker.0).or_default().insert(r.firm.0);
        }
        assert!(firms_of.values().all(|f| f.len() == 1));
        let wt: Vec<f64> = truth.row_cells.iter().map(|c| c.0 as f64).collect();
        let ft: Vec<f64> = truth.row_cells.iter().map(|c| c.1 as f64).collect();
        assert!(spearman(&wt, &ft).unwrap() > 0.9);
        assert!(truth.shares.sorting > 0.05);
    }

    #[test]
    fn independent_matching_has_negligible_sorting() {
        let spec = SyntheticSpec {
            n_workers: 10_000,
            n_firms: 100,
            sorting_strength: 0.0,
            noise_sd: 0.05,
            ..SyntheticSpec::default()
        };
        let (_, truth) = generate(&spec).unwrap();
        assert!(
            truth.shares.sorting.abs() < 0.02,
            "sorting share {}",
            truth.shares.sorting
        );
    }

    #[test]
    fn noiseless_pipeline_recovers_the_ground_truth_exactly() {
        let spec = SyntheticSpec {
            n_workers: 800,
            n_firms: 60,
            sorting_strength: 0.5,
            interaction_scale: 0.6,
            noise_sd: 0.0,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let (panel, truth) = generate(&spec).unwrap();
        let rows = panel.all_rows();
        let stats = cell_stats(&panel, &rows, &truth.row_cells).unwrap();
        let effects = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER).unwrap();
        let dec = decompose_variance(&panel, &rows, &truth.row_cells, &stats, &effects).unwrap();
        assert!((dec.components.worker - truth.components.worker).abs() < 1e-8);
        assert!((dec.components.firm - truth.components.firm).abs() < 1e-8);
        assert!((dec.components.sorting - truth.components.sorting).abs() < 1e-8);
        assert!((dec.components.interaction - truth.components.interaction).abs() < 1e-8);
        assert!(dec.components.residual < 1e-12);
    }

    #[test]
    fn covariates_order_the_types() {
        let (panel, truth) = generate(&small(13)).unwrap();
        let mut age_by_type: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        let mut size_by_type: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        for (i, r) in panel.rows().iter().enumerate() {
            let (wc, fc) = truth.row_cells[i];
            let age = match r.values[0] {
                Value::Numeric(v) => v,
                _ => unreachable!(),
            };
            let size = match r.values[4] {
                Value::Numeric(v) => v,
                _ => unreachable!(),
            };
            let e = age_by_type.entry(wc).or_insert((0.0, 0.0));
            e.0 += age;
            e.1 += 1.0;
            let e = size_by_type.entry(fc).or_insert((0.0, 0.0));
            e.0 += size;
            e.1 += 1.0;
        }
        let age_means: Vec<f64> = age_by_type.values().map(|(s, n)| s / n).collect();
        assert!(age_means.windows(2).all(|w| w[0] < w[1]), "{age_means:?}");
        let size_means: Vec<f64> = size_by_type.values().map(|(s, n)| s / n).collect();
        assert!(size_means.windows(2).all(|w| w[0] < w[1]), "{size_means:?}");
    }

    #[test]
    fn zero_move_rate_freezes_matches_and_one_forces_redraws() {
        let frozen = SyntheticSpec {
            n_workers: 300,
            n_firms: 30,
            move_rate: 0.0,
            ..SyntheticSpec::default()
        };
        let (panel, _) = generate(&frozen).unwrap();
        let mut firms_of: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
        for r in panel.rows() {
            firms_of.entry(r.worker.0).or_default().insert(r.firm.0);
        }
        assert!(firms_of.values().all(|f| f.len() == 1));

        let churning = SyntheticSpec { move_rate: 1.0, ..frozen };
        let (panel, _) = generate(&churning).unwrap();
        let mut firms_of: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
        for r in panel.rows() {
            firms_of.entry(r.worker.0).or_default().insert(r.firm.0);
        }
        let movers = firms_of.values().filter(|f| f.len() > 1).count();
        assert!(movers * 2 > firms_of.len(), "only {movers} movers");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.sorting_strength = 1.5;
        assert!(matches!(generate(&spec), Err(SynthError::BadSpec(_))));
        let mut spec = SyntheticSpec::default();
        spec.n_workers = 0;
        assert!(matches!(generate(&spec), Err(SynthError::BadSpec(_))));
        let mut spec = SyntheticSpec::default();
        spec.noise_sd = -0.1;
        assert!(matches!(generate(&spec), Err(SynthError::BadSpec(_))));
    }

    #[test]
    fn ground_truth_serializes_without_its_secrets() {
        let (_, truth) = generate(&small(2)).unwrap();
        let json = serde_json::to_string(&truth).unwrap();
        assert!(!json.contains("noise"));
        let back: GroundTruth = serde_json::from_str(&json).unwrap();
        assert_eq!(back.worker_types, truth.worker_types);
        assert!(back.noise.is_empty());
        assert!((back.components.worker - truth.components.worker).abs() < 1e-15);
    }
}
