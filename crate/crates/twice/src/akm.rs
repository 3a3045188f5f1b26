//! Two-way fixed-effects benchmark, OLS baselines, and concordance measures.
//!
//! The fixed-effects model `Y = μ + θ_worker + Ψ_firm + X'β + ε` is solved on
//! a connected panel by absorbing worker effects (within-worker demeaning)
//! and running preconditioned conjugate gradient on the reduced firm/control
//! normal equations. One firm is pinned per component, then both effect sets
//! are re-centered to row-weighted mean zero, with the level carried by `μ`.
//!
//! Controls follow the usual convention: calendar-year indicators (first
//! year dropped) plus an age polynomial that is flat at age 40 — powers two
//! and up of `(age − 40)`, the linear term excluded because it is collinear
//! with worker and year effects.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ColumnKind, Side, Value};
use crate::graph::component_labels;
use crate::model::{fit_linear, r_squared, Fitted, LinearModel, ModelError, Term};
use crate::panel::Panel;

#[derive(Debug, Error)]
pub enum AkmError {
    #[error("no rows to fit")]
    EmptyInput,
    #[error("expected {0} values, got {1}")]
    LengthMismatch(usize, usize),
    #[error("panel has {components} connected components; restrict to the largest first")]
    NotConnected { components: usize },
    #[error("control columns are collinear beyond tolerance")]
    SingularControls,
    #[error("column `{0}` is missing or not numeric")]
    UnknownColumn(String),
    #[error("row references {0} absent from the fitted model")]
    MissingEffect(String),
    #[error("solver stalled after {iterations} iterations (relative residual {residual:.3e})")]
    SolverStalled { iterations: usize, residual: f64 },
    #[error("weights must be positive and finite")]
    InvalidWeights,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Control-variable configuration for the fixed-effects fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlsConfig {
    /// Numeric column holding worker age; `None` uses a column named `age`
    /// when one exists and otherwise fits without age controls.
    pub age_column: Option<String>,
    /// Highest age power; powers `2..=degree` of `(age − 40)` enter. Values
    /// below two disable age controls.
    pub age_degree: usize,
    pub year_effects: bool,
}

impl Default for ControlsConfig {
    fn default() -> Self {
        Self { age_column: None, age_degree: 3, year_effects: true }
    }
}

/// Fitted two-way fixed-effects model. `theta` and `psi` are keyed by the
/// panel's worker and firm keys and both average to zero over rows; the wage
/// level sits in `intercept`.
#[derive(Debug, Clone)]
pub struct AkmModel {
    pub intercept: f64,
    pub theta: BTreeMap<u32, f64>,
    pub psi: BTreeMap<u32, f64>,
    pub beta: Vec<f64>,
    pub control_names: Vec<String>,
    /// Per-row residuals, parallel to the rows passed to [`fit_akm`].
    pub residuals: Vec<f64>,
    /// Firm whose effect was pinned to zero before re-centering.
    pub pinned_firm: u32,
    pub cg_iterations: usize,
    /// Relative normal-equation residual at termination.
    pub cg_residual: f64,
}

fn build_controls(
    panel: &Panel,
    rows: &[usize],
    config: &ControlsConfig,
) -> Result<(Vec<String>, Vec<f64>), AkmError> {
    let age_col = match &config.age_column {
        Some(name) => match panel.schema().position(name) {
            Some(c) if panel.schema().columns[c].kind == ColumnKind::Numeric => Some(c),
            _ => return Err(AkmError::UnknownColumn(name.clone())),
        },
        None => panel
            .schema()
            .position("age")
            .filter(|&c| panel.schema().columns[c].kind == ColumnKind::Numeric),
    };
    let mut names = Vec::new();
    if let Some(_) = age_col {
        if config.age_degree >= 2 {
            for d in 2..=config.age_degree {
                names.push(format!("age_c{d}"));
            }
        }
    }
    let mut years: Vec<i32> = rows.iter().map(|&r| panel.rows()[r].year).collect();
    years.sort_unstable();
    years.dedup();
    let year_dummies: Vec<i32> =
        if config.year_effects { years.iter().skip(1).copied().collect() } else { Vec::new() };
    for y in &year_dummies {
        names.push(format!("year_{y}"));
    }
    let c = names.len();
    let mut x = vec![0.0f64; rows.len() * c];
    for (i, &r) in rows.iter().enumerate() {
        let obs = &panel.rows()[r];
        let mut j = 0;
        if let Some(col) = age_col {
            if config.age_degree >= 2 {
                let age = match obs.values[col] {
                    Value::Numeric(v) => v,
                    Value::Categorical(_) => unreachable!("kind checked above"),
                };
                for d in 2..=config.age_degree {
                    x[i * c + j] = (age - 40.0).powi(d as i32);
                    j += 1;
                }
            }
        }
        for &y in &year_dummies {
            x[i * c + j] = if obs.year == y { 1.0 } else { 0.0 };
            j += 1;
        }
    }
    Ok((names, x))
}

/// Fits worker and firm fixed effects with controls on a connected panel.
pub fn fit_akm(
    panel: &Panel,
    rows: &[usize],
    config: &ControlsConfig,
) -> Result<AkmModel, AkmError> {
    if rows.is_empty() {
        return Err(AkmError::EmptyInput);
    }
    let labels = component_labels(panel, rows);
    if labels.n_components > 1 {
        return Err(AkmError::NotConnected { components: labels.n_components });
    }

    let n = rows.len();
    // local worker/firm indexing
    let mut worker_of: BTreeMap<u32, usize> = BTreeMap::new();
    let mut firm_of: BTreeMap<u32, usize> = BTreeMap::new();
    for &r in rows {
        let obs = &panel.rows()[r];
        let next = worker_of.len();
        worker_of.entry(obs.worker.0).or_insert(next);
        let next = firm_of.len();
        firm_of.entry(obs.firm.0).or_insert(next);
    }
    let n_workers = worker_of.len();
    let n_firms = firm_of.len();
    let row_worker: Vec<usize> =
        rows.iter().map(|&r| worker_of[&panel.rows()[r].worker.0]).collect();
    let row_firm: Vec<usize> = rows.iter().map(|&r| firm_of[&panel.rows()[r].firm.0]).collect();
    let y: Vec<f64> = rows.iter().map(|&r| panel.rows()[r].log_wage).collect();

    let mut worker_rows = vec![0.0f64; n_workers];
    let mut firm_rows = vec![0usize; n_firms];
    for i in 0..n {
        worker_rows[row_worker[i]] += 1.0;
        firm_rows[row_firm[i]] += 1;
    }
    // pin the firm with the most rows; BTreeMap iteration order makes the
    // strict comparison prefer the smaller key on ties
    let pinned = firm_of
        .iter()
        .max_by(|a, b| firm_rows[*a.1].cmp(&firm_rows[*b.1]).then(b.0.cmp(a.0)))
        .map(|(&key, &idx)| (key, idx))
        .expect("nonempty");
    let firm_unknown: Vec<Option<usize>> = (0..n_firms)
        .map(|f| {
            if f == pinned.1 {
                None
            } else if f < pinned.1 {
                Some(f)
            } else {
                Some(f - 1)
            }
        })
        .collect();
    let j1 = n_firms - 1;

    let (control_names, x_raw) = build_controls(panel, rows, config)?;
    let c = control_names.len();

    let demean = |t: &mut [f64]| {
        let mut sums = vec![0.0f64; n_workers];
        for i in 0..n {
            sums[row_worker[i]] += t[i];
        }
        for (w, s) in sums.iter_mut().enumerate() {
            *s /= worker_rows[w];
        }
        for i in 0..n {
            t[i] -= sums[row_worker[i]];
        }
    };

    // demeaned controls, used by the solver, the preconditioner, and the
    // collinearity check
    let mut x_dem = x_raw.clone();
    for col in 0..c {
        let mut t: Vec<f64> = (0..n).map(|i| x_dem[i * c + col]).collect();
        demean(&mut t);
        for i in 0..n {
            x_dem[i * c + col] = t[i];
        }
    }
    if c > 0 {
        let mut gram = nalgebra::DMatrix::<f64>::zeros(c, c);
        for i in 0..n {
            for a in 0..c {
                for b in a..c {
                    gram[(a, b)] += x_dem[i * c + a] * x_dem[i * c + b];
                }
            }
        }
        for a in 0..c {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let eig = gram.symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if max_ev <= 0.0 || min_ev <= max_ev * 1e-10 {
            return Err(AkmError::SingularControls);
        }
    }

    let unknowns = j1 + c;
    let apply = |z: &[f64]| -> Vec<f64> {
        let mut t = vec![0.0f64; n];
        for i in 0..n {
            let mut v = firm_unknown[row_firm[i]].map(|u| z[u]).unwrap_or(0.0);
            for col in 0..c {
                v += x_dem[i * c + col] * z[j1 + col];
            }
            t[i] = v;
        }
        demean(&mut t);
        let mut out = vec![0.0f64; unknowns];
        for i in 0..n {
            if let Some(u) = firm_unknown[row_firm[i]] {
                out[u] += t[i];
            }
            for col in 0..c {
                out[j1 + col] += x_dem[i * c + col] * t[i];
            }
        }
        out
    };

    let mut rhs = vec![0.0f64; unknowns];
    {
        let mut t = y.clone();
        demean(&mut t);
        for i in 0..n {
            if let Some(u) = firm_unknown[row_firm[i]] {
                rhs[u] += t[i];
            }
            for col in 0..c {
                rhs[j1 + col] += x_dem[i * c + col] * t[i];
            }
        }
    }

    // Jacobi preconditioner: exact diagonal of the reduced normal matrix
    let mut diag = vec![0.0f64; unknowns];
    {
        let mut pair_counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for i in 0..n {
            *pair_counts.entry((row_worker[i], row_firm[i])).or_insert(0.0) += 1.0;
        }
        for (&(w, f), &nwj) in &pair_counts {
            if let Some(u) = firm_unknown[f] {
                diag[u] += nwj * (1.0 - nwj / worker_rows[w]);
            }
        }
        for i in 0..n {
            for col in 0..c {
                diag[j1 + col] += x_dem[i * c + col] * x_dem[i * c + col];
            }
        }
        for d in &mut diag {
            if *d <= 0.0 {
                *d = 1.0;
            }
        }
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let b_norm = norm(&rhs);
    let mut z = vec![0.0f64; unknowns];
    let mut iterations = 0usize;
    let mut rel_residual = 0.0f64;
    if unknowns > 0 && b_norm > 0.0 {
        let tol = 1e-10;
        let max_iter = 10 * (n_firms + c);
        let mut r = rhs.clone();
        let mut d: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
        let mut rho: f64 = r.iter().zip(&d).map(|(a, b)| a * b).sum();
        loop {
            iterations += 1;
            let q = apply(&d);
            let dq: f64 = d.iter().zip(&q).map(|(a, b)| a * b).sum();
            if dq <= 0.0 {
                break; // numerically exhausted search direction
            }
            let step = rho / dq;
            for i in 0..unknowns {
                z[i] += step * d[i];
                r[i] -= step * q[i];
            }
            rel_residual = norm(&r) / b_norm;
            if rel_residual <= tol || iterations >= max_iter {
                break;
            }
            let s: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
            let rho_next: f64 = r.iter().zip(&s).map(|(a, b)| a * b).sum();
            let ratio = rho_next / rho;
            for i in 0..unknowns {
                d[i] = s[i] + ratio * d[i];
            }
            rho = rho_next;
        }
        if rel_residual > 1e-8 {
            return Err(AkmError::SolverStalled { iterations, residual: rel_residual });
        }
    }

    // back-substitution with raw controls
    let beta: Vec<f64> = (0..c).map(|col| z[j1 + col]).collect();
    let mut psi_local = vec![0.0f64; n_firms];
    for (f, slot) in firm_unknown.iter().enumerate() {
        if let Some(u) = slot {
            psi_local[f] = z[*u];
        }
    }
    let xb: Vec<f64> = (0..n)
        .map(|i| (0..c).map(|col| x_raw[i * c + col] * beta[col]).sum::<f64>())
        .collect();
    let mut theta_local = vec![0.0f64; n_workers];
    for i in 0..n {
        theta_local[row_worker[i]] += (y[i] - psi_local[row_firm[i]] - xb[i]) / worker_rows[row_worker[i]];
    }
    let psi_shift: f64 = (0..n).map(|i| psi_local[row_firm[i]]).sum::<f64>() / n as f64;
    for p in &mut psi_local {
        *p -= psi_shift;
    }
    for t in &mut theta_local {
        *t += psi_shift;
    }
    let intercept: f64 = (0..n).map(|i| theta_local[row_worker[i]]).sum::<f64>() / n as f64;
    for t in &mut theta_local {
        *t -= intercept;
    }
    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - intercept - theta_local[row_worker[i]] - psi_local[row_firm[i]] - xb[i])
        .collect();

    Ok(AkmModel {
        intercept,
        theta: worker_of.iter().map(|(&key, &idx)| (key, theta_local[idx])).collect(),
        psi: firm_of.iter().map(|(&key, &idx)| (key, psi_local[idx])).collect(),
        beta,
        control_names,
        residuals,
        pinned_firm: pinned.0,
        cg_iterations: iterations,
        cg_residual: rel_residual,
    })
}

/// The four fixed-effects variance pieces.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AkmShares {
    pub worker: f64,
    pub firm: f64,
    pub sorting: f64,
    pub residual: f64,
}

impl AkmShares {
    pub fn sum(&self) -> f64 {
        self.worker + self.firm + self.sorting + self.residual
    }
}

/// Variance decomposition of control-residualized wages: wages net of `X'β`
/// split into `Var(θ) + Var(Ψ) + 2Cov(θ,Ψ) + Var(ε)`. The total excludes the
/// controls' contribution, which is the convention stated in `convention`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AkmDecomposition {
    pub total_variance: f64,
    pub components: AkmShares,
    pub shares: AkmShares,
    pub closure_gap: f64,
    pub convention: String,
}

pub fn akm_decomposition(
    model: &AkmModel,
    panel: &Panel,
    rows: &[usize],
) -> Result<AkmDecomposition, AkmError> {
    if rows.is_empty() {
        return Err(AkmError::EmptyInput);
    }
    if rows.len() != model.residuals.len() {
        return Err(AkmError::LengthMismatch(model.residuals.len(), rows.len()));
    }
    let n = rows.len();
    let mut a = vec![0.0f64; n];
    let mut p = vec![0.0f64; n];
    for (i, &r) in rows.iter().enumerate() {
        let obs = &panel.rows()[r];
        a[i] = *model
            .theta
            .get(&obs.worker.0)
            .ok_or_else(|| AkmError::MissingEffect(format!("worker {}", panel.worker_id(obs.worker))))?;
        p[i] = *model
            .psi
            .get(&obs.firm.0)
            .ok_or_else(|| AkmError::MissingEffect(format!("firm {}", panel.firm_id(obs.firm))))?;
    }
    let e = &model.residuals;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mp, me) = (mean(&a), mean(&p), mean(e));
    let mut var_a = 0.0;
    let mut var_p = 0.0;
    let mut var_e = 0.0;
    let mut cov_ap = 0.0;
    let mut var_y = 0.0;
    let my = ma + mp + me;
    for i in 0..n {
        let (da, dp, de) = (a[i] - ma, p[i] - mp, e[i] - me);
        var_a += da * da;
        var_p += dp * dp;
        var_e += de * de;
        cov_ap += da * dp;
        let dy = a[i] + p[i] + e[i] - my;
        var_y += dy * dy;
    }
    let nf = n as f64;
    let components = AkmShares {
        worker: var_a / nf,
        firm: var_p / nf,
        sorting: 2.0 * cov_ap / nf,
        residual: var_e / nf,
    };
    let total_variance = var_y / nf;
    let shares = if total_variance > 0.0 {
        AkmShares {
            worker: components.worker / total_variance,
            firm: components.firm / total_variance,
            sorting: components.sorting / total_variance,
            residual: components.residual / total_variance,
        }
    } else {
        AkmShares { worker: 0.0, firm: 0.0, sorting: 0.0, residual: 0.0 }
    };
    let closure_gap = if total_variance > 0.0 {
        (components.sum() - total_variance).abs() / total_variance
    } else {
        components.sum().abs()
    };
    Ok(AkmDecomposition {
        total_variance,
        components,
        shares,
        closure_gap,
        convention: "controls_residualized".to_string(),
    })
}

// ---------------------------------------------------------------------------
// OLS baselines

/// Continuous covariates that receive polynomial expansion in the degree-d
/// baselines; everything else stays linear.
pub const POLYNOMIAL_COLUMNS: &[&str] = &["age", "tenure", "log_size", "log_revenue", "log_revpw"];

/// One fitted wage-regression baseline. Degree 0 is the "simple" model: an
/// age polynomial flat at 40 plus year indicators. Degrees 1–3 use every
/// covariate, expanding the [`POLYNOMIAL_COLUMNS`] up to the degree, with
/// one-hot categoricals (first level dropped) and year indicators.
#[derive(Debug, Clone, Serialize)]
pub struct OlsBaseline {
    pub degree: usize,
    pub label: String,
    pub model: LinearModel,
    pub train_mse: f64,
    pub train_r2: f64,
    pub test_mse: f64,
    pub test_r2: f64,
}

fn numeric_column_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits the requested baseline regressions on the training rows and scores
/// them on both samples. Rank-deficient designs (an absent dummy level, a
/// constant column) resolve to the minimum-norm solution rather than failing.
pub fn fit_ols_baselines(
    panel: &Panel,
    train_rows: &[usize],
    test_rows: &[usize],
    degrees: &[usize],
) -> Result<Vec<OlsBaseline>, AkmError> {
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(AkmError::EmptyInput);
    }
    let train = panel.wage_matrix(train_rows, None);
    let test = panel.wage_matrix(test_rows, None);
    let y_train = panel.wages(train_rows);
    let y_test = panel.wages(test_rows);
    let schema = train.schema().clone();
    let year_col = schema.position("year").expect("wage matrix carries a year column");

    let numeric_values = |col: usize| -> Vec<f64> {
        match train.column(col) {
            crate::data::FeatureColumn::Numeric(v) => v.clone(),
            crate::data::FeatureColumn::Categorical(_) => unreachable!("numeric column"),
        }
    };
    let mut years = numeric_values(year_col);
    years.sort_by(|a, b| a.partial_cmp(b).unwrap());
    years.dedup();
    let year_terms: Vec<Term> = years
        .iter()
        .skip(1)
        .map(|&value| Term::NumericEquals { column: year_col, value })
        .collect();

    // "age" when available, otherwise the first numeric worker covariate
    let age_col = schema.position("age").filter(|&col| schema.features[col].is_numeric()).or_else(|| {
        panel
            .side_columns(Side::Worker)
            .into_iter()
            .find(|&col| panel.schema().columns[col].kind == ColumnKind::Numeric)
            .and_then(|col| schema.position(&panel.schema().columns[col].name))
    });

    let mut out = Vec::new();
    for &degree in degrees {
        let mut terms = vec![Term::Intercept];
        if degree == 0 {
            if let Some(col) = age_col {
                for d in 2..=3u32 {
                    terms.push(Term::Power { column: col, degree: d, mean: 40.0, scale: 1.0 });
                }
            }
        } else {
            for (col, spec) in schema.features.iter().enumerate() {
                if col == year_col {
                    continue;
                }
                if spec.is_numeric() {
                    let (mean, sd) = numeric_column_moments(&numeric_values(col));
                    let max_degree =
                        if POLYNOMIAL_COLUMNS.contains(&spec.name.as_str()) { degree } else { 1 };
                    for d in 1..=max_degree as u32 {
                        terms.push(Term::Power { column: col, degree: d, mean, scale: sd });
                    }
                } else {
                    for level in 1..spec.cardinality() {
                        terms.push(Term::Dummy { column: col, level });
                    }
                }
            }
        }
        terms.extend(year_terms.iter().cloned());
        let model = fit_linear(&train, &y_train, terms)?;
        let pred_train = model.predict(&train)?;
        let pred_test = model.predict(&test)?;
        let mse = |pred: &[f64], actual: &[f64]| -> f64 {
            pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum::<f64>()
                / actual.len() as f64
        };
        out.push(OlsBaseline {
            degree,
            label: if degree == 0 { "simple".to_string() } else { format!("degree-{degree}") },
            train_mse: mse(&pred_train, &y_train),
            train_r2: r_squared(&pred_train, &y_train),
            test_mse: mse(&pred_test, &y_test),
            test_r2: r_squared(&pred_test, &y_test),
            model,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// concordance measures

/// Share of weighted effect variance explained by class membership.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EtaSquared {
    pub value: f64,
    /// Set when the effects carry no variance at all; `value` is then zero
    /// by convention.
    pub zero_variance: bool,
}

/// Weighted between-class variance over total weighted variance.
pub fn eta_squared(
    effects: &[f64],
    classes: &[u32],
    weights: &[f64],
) -> Result<EtaSquared, AkmError> {
    if effects.is_empty() {
        return Err(AkmError::EmptyInput);
    }
    if classes.len() != effects.len() {
        return Err(AkmError::LengthMismatch(effects.len(), classes.len()));
    }
    if weights.len() != effects.len() {
        return Err(AkmError::LengthMismatch(effects.len(), weights.len()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(AkmError::InvalidWeights);
    }
    let total_weight: f64 = weights.iter().sum();
    let grand: f64 =
        effects.iter().zip(weights).map(|(e, w)| e * w).sum::<f64>() / total_weight;
    let mut class_sums: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    let mut total = 0.0;
    for ((&e, &cl), &w) in effects.iter().zip(classes).zip(weights) {
        let entry = class_sums.entry(cl).or_insert((0.0, 0.0));
        entry.0 += w * e;
        entry.1 += w;
        total += w * (e - grand) * (e - grand);
    }
    if total <= 0.0 {
        return Ok(EtaSquared { value: 0.0, zero_variance: true });
    }
    let between: f64 = class_sums
        .values()
        .map(|&(sum, w)| {
            let m = sum / w;
            w * (m - grand) * (m - grand)
        })
        .sum();
    Ok(EtaSquared { value: between / total, zero_variance: false })
}

fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation: Pearson correlation of mid-ranks (ties averaged).
/// Returns zero when either side has no rank variation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AkmError> {
    if x.len() != y.len() {
        return Err(AkmError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AkmError::EmptyInput);
    }
    let rx = midranks(x);
    let ry = midranks(y);
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let (dx, dy) = (rx[i] - mx, ry[i] - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnSchema, ColumnSpec};
    use crate::panel::PanelBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_controls() -> ControlsConfig {
        ControlsConfig { age_column: None, age_degree: 0, year_effects: false }
    }

    fn bare(edges: &[(&str, &str, i32, f64)]) -> Panel {
        let mut b = PanelBuilder::new(ColumnSchema::new(vec![]));
        for &(w, f, y, wage) in edges {
            b.push_row(w, f, y, wage, vec![]).unwrap();
        }
        b.finish().unwrap()
    }

    /// Dense least-squares oracle on the explicit dummy design, normalized
    /// the same way as the solver: pinned firm, ψ re-centered to row mean
    /// zero, level moved into the intercept.
    fn dense_oracle(
        panel: &Panel,
        rows: &[usize],
        pinned_firm: u32,
    ) -> (BTreeMap<u32, f64>, BTreeMap<u32, f64>, f64) {
        let mut workers: Vec<u32> = rows.iter().map(|&r| panel.rows()[r].worker.0).collect();
        workers.sort_unstable();
        workers.dedup();
        let mut firms: Vec<u32> = rows.iter().map(|&r| panel.rows()[r].firm.0).collect();
        firms.sort_unstable();
        firms.dedup();
        let free_firms: Vec<u32> = firms.iter().copied().filter(|&f| f != pinned_firm).collect();
        let n = rows.len();
        let p = workers.len() + free_firms.len();
        let mut design = nalgebra::DMatrix::<f64>::zeros(n, p);
        let mut target = nalgebra::DVector::<f64>::zeros(n);
        for (i, &r) in rows.iter().enumerate() {
            let obs = &panel.rows()[r];
            let wi = workers.iter().position(|&w| w == obs.worker.0).unwrap();
            design[(i, wi)] = 1.0;
            if let Some(fi) = free_firms.iter().position(|&f| f == obs.firm.0) {
                design[(i, workers.len() + fi)] = 1.0;
            }
            target[i] = obs.log_wage;
        }
        let solution = design
            .clone()
            .pseudo_inverse(1e-10)
            .expect("pseudo-inverse exists")
            * target;
        let mut theta: BTreeMap<u32, f64> =
            workers.iter().enumerate().map(|(i, &w)| (w, solution[i])).collect();
        let mut psi: BTreeMap<u32, f64> = firms
            .iter()
            .map(|&f| {
                let v = free_firms
                    .iter()
                    .position(|&g| g == f)
                    .map(|i| solution[workers.len() + i])
                    .unwrap_or(0.0);
                (f, v)
            })
            .collect();
        let shift: f64 = rows
            .iter()
            .map(|&r| psi[&panel.rows()[r].firm.0])
            .sum::<f64>()
            / n as f64;
        for v in psi.values_mut() {
            *v -= shift;
        }
        for v in theta.values_mut() {
            *v += shift;
        }
        let mu: f64 = rows
            .iter()
            .map(|&r| theta[&panel.rows()[r].worker.0])
            .sum::<f64>()
            / n as f64;
        for v in theta.values_mut() {
            *v -= mu;
        }
        (theta, psi, mu)
    }

    #[test]
    fn single_worker_single_firm_normalization() {
        let panel = bare(&[("w1", "f1", 2000, 1.0), ("w1", "f1", 2001, 2.0)]);
        let model = fit_akm(&panel, &panel.all_rows(), &no_controls()).unwrap();
        assert!((model.intercept - 1.5).abs() < 1e-12);
        assert!(model.theta[&0].abs() < 1e-12);
        assert!(model.psi[&0].abs() < 1e-12);
        assert!((model.residuals[0] + 0.5).abs() < 1e-12);
        assert!((model.residuals[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mover_panel_matches_dense_least_squares() {
        // three workers, two firms, one mover; f1 has the most rows
        let panel = bare(&[
            ("w1", "f1", 2000, 1.0),
            ("w1", "f1", 2001, 1.2),
            ("w2", "f1", 2000, 1.4),
            ("w2", "f2", 2001, 2.0),
            ("w3", "f2", 2000, 2.2),
        ]);
        let rows = panel.all_rows();
        let model = fit_akm(&panel, &rows, &no_controls()).unwrap();
        assert_eq!(panel.firm_id(crate::panel::FirmKey(model.pinned_firm)), "f1");
        let (theta, psi, mu) = dense_oracle(&panel, &rows, model.pinned_firm);
        assert!((model.intercept - mu).abs() < 1e-8);
        for (k, v) in &model.theta {
            assert!((v - theta[k]).abs() < 1e-8, "theta[{k}] {v} vs {}", theta[k]);
        }
        for (k, v) in &model.psi {
            assert!((v - psi[k]).abs() < 1e-8, "psi[{k}] {v} vs {}", psi[k]);
        }
        assert!(model.cg_residual <= 1e-8);
    }

    #[test]
    fn random_connected_panels_match_dense_least_squares() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut edges = Vec::new();
            // chain firms to force one component, then random extra rows
            for w in 0..20usize {
                let f0 = w % 6;
                let f1 = (w + 1) % 6;
                edges.push((format!("w{w:02}"), format!("f{f0}"), 2000, rng.gen_range(0.0..2.0)));
                edges.push((format!("w{w:02}"), format!("f{f1}"), 2001, rng.gen_range(0.0..2.0)));
                if rng.gen_bool(0.5) {
                    let f2 = rng.gen_range(0..6);
                    edges.push((
                        format!("w{w:02}"),
                        format!("f{f2}"),
                        2002,
                        rng.gen_range(0.0..2.0),
                    ));
                }
            }
            let rows_ref: Vec<(&str, &str, i32, f64)> =
                edges.iter().map(|(w, f, y, g)| (w.as_str(), f.as_str(), *y, *g)).collect();
            let panel = bare(&rows_ref);
            let rows = panel.all_rows();
            let model = fit_akm(&panel, &rows, &no_controls()).unwrap();
            let (theta, psi, mu) = dense_oracle(&panel, &rows, model.pinned_firm);
            assert!((model.intercept - mu).abs() < 1e-8, "seed {seed}");
            for (k, v) in &model.theta {
                assert!((v - theta[k]).abs() < 1e-8, "seed {seed} theta[{k}]");
            }
            for (k, v) in &model.psi {
                assert!((v - psi[k]).abs() < 1e-8, "seed {seed} psi[{k}]");
            }
        }
    }

    #[test]
    fn disconnected_panel_is_rejected() {
        let panel = bare(&[("w1", "f1", 2000, 1.0), ("w2", "f2", 2000, 2.0)]);
        match fit_akm(&panel, &panel.all_rows(), &no_controls()) {
            Err(AkmError::NotConnected { components }) => assert_eq!(components, 2),
            other => panic!("expected NotConnected, got {other:?}"),
        }
    }

    fn age_panel() -> Panel {
        let schema = ColumnSchema::new(vec![ColumnSpec::numeric("age", Side::Worker)]);
        let mut b = PanelBuilder::new(schema);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for w in 0..24usize {
            let base_age = rng.gen_range(25.0..55.0f64);
            for (t, y) in (2000..2003).enumerate() {
                let firm = match (w + t) % 4 {
                    0 => "f0",
                    1 => "f1",
                    2 => "f2",
                    _ => "f3",
                };
                let age: f64 = base_age + t as f64;
                let wage = 1.0
                    + 0.05 * (w % 5) as f64
                    + 0.0004 * (age - 40.0) * (age - 40.0)
                    + rng.gen_range(-0.05..0.05);
                b.push_row(
                    &format!("w{w:02}"),
                    firm,
                    y,
                    wage,
                    vec![Value::Numeric(age)],
                )
                .unwrap();
            }
        }
        b.finish().unwrap()
    }

    #[test]
    fn wage_shift_leaves_effects_and_shares_unchanged() {
        let panel = age_panel();
        let rows = panel.all_rows();
        let config = ControlsConfig::default();
        let base = fit_akm(&panel, &rows, &config).unwrap();
        let base_dec = akm_decomposition(&base, &panel, &rows).unwrap();

        let mut b = PanelBuilder::new(panel.schema().clone());
        for r in panel.rows() {
            b.push_row(
                panel.worker_id(r.worker),
                panel.firm_id(r.firm),
                r.year,
                r.log_wage + 3.7,
                r.values.clone(),
            )
            .unwrap();
        }
        let shifted = b.finish().unwrap();
        let moved = fit_akm(&shifted, &shifted.all_rows(), &config).unwrap();
        assert!((moved.intercept - base.intercept - 3.7).abs() < 1e-8);
        for (k, v) in &base.theta {
            assert!((moved.theta[k] - v).abs() < 1e-8);
        }
        for (k, v) in &base.psi {
            assert!((moved.psi[k] - v).abs() < 1e-8);
        }
        let moved_dec = akm_decomposition(&moved, &shifted, &shifted.all_rows()).unwrap();
        assert!((moved_dec.shares.worker - base_dec.shares.worker).abs() < 1e-8);
        assert!((moved_dec.shares.sorting - base_dec.shares.sorting).abs() < 1e-8);
    }

    #[test]
    fn fitted_values_reproduce_wages_with_controls() {
        let panel = age_panel();
        let rows = panel.all_rows();
        let config = ControlsConfig::default();
        let model = fit_akm(&panel, &rows, &config).unwrap();
        assert!(model.cg_residual <= 1e-8);
        // rebuild X'β by hand from the documented control order
        let years = [2001i32, 2002];
        for (i, &r) in rows.iter().enumerate() {
            let obs = &panel.rows()[r];
            let age = match obs.values[0] {
                Value::Numeric(v) => v,
                _ => unreachable!(),
            };
            let mut xb = model.beta[0] * (age - 40.0).powi(2) + model.beta[1] * (age - 40.0).powi(3);
            for (j, &y) in years.iter().enumerate() {
                if obs.year == y {
                    xb += model.beta[2 + j];
                }
            }
            let fitted = model.intercept
                + model.theta[&obs.worker.0]
                + model.psi[&obs.firm.0]
                + xb;
            assert!(
                (obs.log_wage - fitted - model.residuals[i]).abs() < 1e-10,
                "row {i}"
            );
        }
        let dec = akm_decomposition(&model, &panel, &rows).unwrap();
        assert!(dec.closure_gap < 1e-6);
        assert!((dec.shares.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_firm_panel_has_no_firm_or_sorting_variance() {
        let panel = bare(&[
            ("w1", "f1", 2000, 1.0),
            ("w1", "f1", 2001, 1.2),
            ("w2", "f1", 2000, 2.0),
            ("w2", "f1", 2001, 2.4),
            ("w3", "f1", 2000, 0.5),
        ]);
        let rows = panel.all_rows();
        let model = fit_akm(&panel, &rows, &no_controls()).unwrap();
        assert_eq!(model.psi.len(), 1);
        assert!(model.psi[&0].abs() < 1e-12);
        let dec = akm_decomposition(&model, &panel, &rows).unwrap();
        assert_eq!(dec.components.firm, 0.0);
        assert_eq!(dec.components.sorting, 0.0);
        assert!((dec.shares.worker + dec.shares.residual - 1.0).abs() < 1e-8);
    }

    #[test]
    fn collinear_controls_are_rejected() {
        // every worker observed once: demeaned controls vanish entirely
        let schema = ColumnSchema::new(vec![ColumnSpec::numeric("age", Side::Worker)]);
        let mut b = PanelBuilder::new(schema);
        for w in 0..6usize {
            b.push_row(
                &format!("w{w}"),
                "f0",
                2000,
                1.0 + w as f64,
                vec![Value::Numeric(30.0 + w as f64)],
            )
            .unwrap();
        }
        let panel = b.finish().unwrap();
        match fit_akm(&panel, &panel.all_rows(), &ControlsConfig::default()) {
            Err(AkmError::SingularControls) => {}
            other => panic!("expected SingularControls, got {other:?}"),
        }
    }

    fn covariate_panel(n_workers: usize, seed: u64, linear: bool) -> Panel {
        let schema = ColumnSchema::new(vec![
            ColumnSpec::numeric("age", Side::Worker),
            ColumnSpec::numeric("log_size", Side::Firm),
            ColumnSpec::categorical("sector", Side::Firm, 4),
        ]);
        let mut b = PanelBuilder::new(schema);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in 0..n_workers {
            let age0 = rng.gen_range(22.0..60.0f64);
            for (t, y) in (2000..2002).enumerate() {
                let f = rng.gen_range(0..8);
                let log_size = 2.0 + (f % 4) as f64;
                let sector = b.intern_level(2, ["a", "b", "c"][f % 3]).unwrap();
                let age: f64 = age0 + t as f64;
                let wage = if linear {
                    0.3 + 0.05 * age + 0.2 * log_size
                } else {
                    0.3 + 0.002 * (age - 40.0) * (age - 40.0) + 0.2 * log_size
                        + rng.gen_range(-0.1..0.1)
                };
                b.push_row(
                    &format!("w{w:03}"),
                    &format!("f{f}"),
                    y,
                    wage,
                    vec![
                        Value::Numeric(age),
                        Value::Numeric(log_size),
                        Value::Categorical(sector),
                    ],
                )
                .unwrap();
            }
        }
        b.finish().unwrap()
    }

    #[test]
    fn exactly_linear_wages_give_near_perfect_degree_one_fit() {
        let panel = covariate_panel(60, 21, true);
        let rows = panel.all_rows();
        let (train, test) = rows.split_at(80);
        let baselines = fit_ols_baselines(&panel, train, test, &[0, 1, 2, 3]).unwrap();
        assert_eq!(baselines.len(), 4);
        assert_eq!(baselines[0].label, "simple");
        assert_eq!(baselines[1].label, "degree-1");
        assert!(baselines[1].test_r2 > 0.99, "test R² {}", baselines[1].test_r2);
        assert!(baselines[1].test_mse < 1e-10);
        // age and log_size expand with the degree; sector stays one-hot
        assert!(baselines[3].model.terms.len() > baselines[1].model.terms.len());
    }

    #[test]
    fn constant_wages_give_zero_r_squared() {
        let panel = bare(&[
            ("w1", "f1", 2000, 2.5),
            ("w1", "f1", 2001, 2.5),
            ("w2", "f1", 2000, 2.5),
            ("w2", "f1", 2001, 2.5),
        ]);
        let rows = panel.all_rows();
        let baselines = fit_ols_baselines(&panel, &rows[..2], &rows[2..], &[1]).unwrap();
        assert_eq!(baselines[0].test_r2, 0.0);
        assert!(baselines[0].test_mse < 1e-20);
    }

    #[test]
    fn eta_squared_edges_and_affine_invariance() {
        let effects = [1.0, 2.0, 5.0, 9.0];
        let weights = [1.0, 2.0, 1.0, 3.0];
        let own = eta_squared(&effects, &[1, 2, 3, 4], &weights).unwrap();
        assert!((own.value - 1.0).abs() < 1e-12);
        let single = eta_squared(&effects, &[7, 7, 7, 7], &weights).unwrap();
        assert!(single.value.abs() < 1e-12);
        let classes = [1, 1, 2, 2];
        let base = eta_squared(&effects, &classes, &weights).unwrap();
        let transformed: Vec<f64> = effects.iter().map(|e| -3.0 * e + 11.0).collect();
        let affine = eta_squared(&transformed, &classes, &weights).unwrap();
        assert!((base.value - affine.value).abs() < 1e-10);
        assert!(base.value > 0.0 && base.value < 1.0);

        let flat = eta_squared(&[2.0; 4], &classes, &weights).unwrap();
        assert_eq!(flat.value, 0.0);
        assert!(flat.zero_variance);
    }

    #[test]
    fn spearman_edges_and_tied_ranks() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| v * 2.0 - 1.0).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-12);

        // tied case against a brute-force mid-rank oracle
        let xt = [1.0, 2.0, 2.0, 3.0, 1.0];
        let yt = [0.5, 0.1, 0.9, 0.2, 0.5];
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let less = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(&xt), rank(&yt));
        let n = 5.0;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..5 {
            cov += (rx[i] - mx) * (ry[i] - my);
            vx += (rx[i] - mx) * (rx[i] - mx);
            vy += (ry[i] - my) * (ry[i] - my);
        }
        let oracle = cov / (vx * vy).sqrt();
        assert!((spearman(&xt, &yt).unwrap() - oracle).abs() < 1e-12);

        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }
}
