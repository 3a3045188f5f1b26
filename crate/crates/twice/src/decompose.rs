//! Cell means, the weighted additive projection, and the variance
//! decomposition of log wages.
//!
//! Given per-observation cell assignments, wages decompose exactly as
//! `Y = μ + α_ℓ + ψ_k + κ_ℓk + ξ` where `(α, ψ)` solve the cell-share
//! weighted least-squares projection of cell means onto additive worker and
//! firm effects, `κ` is the cell-level deviation from additivity, and `ξ` is
//! the within-cell residual. The projection's first-order conditions make
//! `κ` orthogonal to both `α` and `ψ`, so the five variance components sum
//! to `Var(Y)` without cross-terms.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::Panel;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("no rows to decompose")]
    EmptyInput,
    #[error("expected {0} per-row values, got {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid cell assignment ({worker_cell}, {firm_cell})")]
    InvalidCell { worker_cell: u32, firm_cell: u32 },
    #[error("invalid cell shares: {0}")]
    BadShares(String),
    #[error("projection did not converge after {iterations} sweeps (last change {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64, last: Box<ProjectedEffects> },
}

/// One observed worker-cell × firm-cell combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub worker_cell: u32,
    pub firm_cell: u32,
    /// Empirical share of rows, `π_ℓk`.
    pub share: f64,
    /// Mean log wage, `μ_ℓk`.
    pub mean: f64,
    /// Row count; zero when the stats were built from share matrices rather
    /// than observations.
    pub count: u64,
}

/// Empirical cell shares and means over a set of observations. Unobserved
/// cells are simply absent (share zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStats {
    /// Worker cell count (cells are labeled 1..=l).
    pub l: usize,
    /// Firm cell count (cells are labeled 1..=k).
    pub k: usize,
    /// Observed cells in ascending (worker_cell, firm_cell) order.
    pub cells: Vec<CellRecord>,
    /// Marginal worker-cell shares `π_ℓ`, indexed by `worker_cell - 1`.
    pub worker_share: Vec<f64>,
    /// Marginal firm-cell shares `π_k`, indexed by `firm_cell - 1`.
    pub firm_share: Vec<f64>,
    /// Grand mean log wage `μ`.
    pub grand_mean: f64,
    pub n_rows: u64,
    /// Cells observed with exactly one row (retained, but worth reporting).
    pub singleton_cells: u64,
}

impl CellStats {
    /// Builds stats from explicit share and mean matrices (`l × k`,
    /// worker-major). Shares are normalized to sum to one; zero-share cells
    /// are dropped. Used for synthetic ground truth and tests.
    pub fn from_matrices(
        shares: &[Vec<f64>],
        means: &[Vec<f64>],
    ) -> Result<CellStats, DecomposeError> {
        let l = shares.len();
        if l == 0 || means.len() != l {
            return Err(DecomposeError::BadShares("empty or mismatched matrices".into()));
        }
        let k = shares[0].len();
        if k == 0 || shares.iter().any(|r| r.len() != k) || means.iter().any(|r| r.len() != k) {
            return Err(DecomposeError::BadShares("ragged matrices".into()));
        }
        if shares.iter().flatten().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(DecomposeError::BadShares("shares must be finite and nonnegative".into()));
        }
        let total: f64 = shares.iter().flatten().sum();
        if total <= 0.0 {
            return Err(DecomposeError::BadShares("shares sum to zero".into()));
        }
        let mut cells = Vec::new();
        let mut worker_share = vec![0.0; l];
        let mut firm_share = vec![0.0; k];
        let mut grand_mean = 0.0;
        for li in 0..l {
            for ki in 0..k {
                let share = shares[li][ki] / total;
                if share == 0.0 {
                    continue;
                }
                let mean = means[li][ki];
                cells.push(CellRecord {
                    worker_cell: li as u32 + 1,
                    firm_cell: ki as u32 + 1,
                    share,
                    mean,
                    count: 0,
                });
                worker_share[li] += share;
                firm_share[ki] += share;
                grand_mean += share * mean;
            }
        }
        Ok(CellStats {
            l,
            k,
            cells,
            worker_share,
            firm_share,
            grand_mean,
            n_rows: 0,
            singleton_cells: 0,
        })
    }

    /// Lookup table from (worker_cell, firm_cell) to position in `cells`.
    pub fn index(&self) -> BTreeMap<(u32, u32), usize> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, c)| ((c.worker_cell, c.firm_cell), i))
            .collect()
    }
}

/// Empirical shares and mean log wages per observed cell.
pub fn cell_stats(
    panel: &Panel,
    rows: &[usize],
    assignments: &[(u32, u32)],
) -> Result<CellStats, DecomposeError> {
    if rows.is_empty() {
        return Err(DecomposeError::EmptyInput);
    }
    if rows.len() != assignments.len() {
        return Err(DecomposeError::LengthMismatch(rows.len(), assignments.len()));
    }
    let mut acc: BTreeMap<(u32, u32), (f64, u64)> = BTreeMap::new();
    let mut wage_sum = 0.0;
    for (i, &r) in rows.iter().enumerate() {
        let (wc, fc) = assignments[i];
        if wc == 0 || fc == 0 {
            return Err(DecomposeError::InvalidCell { worker_cell: wc, firm_cell: fc });
        }
        let wage = panel.rows()[r].log_wage;
        let entry = acc.entry((wc, fc)).or_insert((0.0, 0));
        entry.0 += wage;
        entry.1 += 1;
        wage_sum += wage;
    }
    let n = rows.len() as f64;
    let l = acc.keys().map(|&(wc, _)| wc).max().unwrap() as usize;
    let k = acc.keys().map(|&(_, fc)| fc).max().unwrap() as usize;
    let mut worker_share = vec![0.0; l];
    let mut firm_share = vec![0.0; k];
    let mut singleton_cells = 0;
    let cells: Vec<CellRecord> = acc
        .iter()
        .map(|(&(wc, fc), &(sum, count))| {
            let share = count as f64 / n;
            worker_share[wc as usize - 1] += share;
            firm_share[fc as usize - 1] += share;
            if count == 1 {
                singleton_cells += 1;
            }
            CellRecord { worker_cell: wc, firm_cell: fc, share, mean: sum / count as f64, count }
        })
        .collect();
    Ok(CellStats {
        l,
        k,
        cells,
        worker_share,
        firm_share,
        grand_mean: wage_sum / n,
        n_rows: rows.len() as u64,
        singleton_cells,
    })
}

/// How the additive projection was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverRoute {
    Backfitting,
    /// Direct weighted least squares, used only when back-fitting fails to
    /// converge and the cell grid is small enough.
    DenseFallback,
}

/// Additive worker and firm effects projected from cell means, with the
/// cell-level interaction residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectedEffects {
    /// Worker effects `α_ℓ`, indexed by `worker_cell - 1`.
    pub alpha: Vec<f64>,
    /// Firm effects `ψ_k`, indexed by `firm_cell - 1`.
    pub psi: Vec<f64>,
    /// Interaction `κ_ℓk = μ_ℓk − μ − α_ℓ − ψ_k`, parallel to the
    /// originating `CellStats::cells` order.
    pub kappa: Vec<f64>,
    /// Back-fitting sweeps performed (zero for the dense route).
    pub iterations: usize,
    /// Largest coefficient change in the final sweep.
    pub max_change: f64,
    pub solver: SolverRoute,
}

pub const PROJECTION_TOL: f64 = 1e-10;
pub const PROJECTION_MAX_ITER: usize = 10_000;
/// Largest `l × k` grid the dense fallback will attempt.
pub const DENSE_FALLBACK_MAX_CELLS: usize = 4096;

/// Solves the share-weighted additive projection of cell means. Back-fitting
/// alternates the two first-order conditions with re-centering after each
/// sweep; if it fails to converge and the grid is at most
/// [`DENSE_FALLBACK_MAX_CELLS`] cells, a direct dense solve is used instead.
pub fn project_additive(
    stats: &CellStats,
    tol: f64,
    max_iter: usize,
) -> Result<ProjectedEffects, DecomposeError> {
    match backfit(stats, tol, max_iter) {
        Err(DecomposeError::NoConvergence { .. }) if stats.l * stats.k <= DENSE_FALLBACK_MAX_CELLS => {
            Ok(dense_project(stats))
        }
        other => other,
    }
}

fn effects_from(stats: &CellStats, alpha: Vec<f64>, psi: Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let kappa: Vec<f64> = stats
        .cells
        .iter()
        .map(|c| {
            c.mean
                - stats.grand_mean
                - alpha[c.worker_cell as usize - 1]
                - psi[c.firm_cell as usize - 1]
        })
        .collect();
    (alpha, psi, kappa)
}

fn backfit(
    stats: &CellStats,
    tol: f64,
    max_iter: usize,
) -> Result<ProjectedEffects, DecomposeError> {
    let (l, k) = (stats.l, stats.k);
    let mu = stats.grand_mean;
    let mut alpha = vec![0.0f64; l];
    let mut psi = vec![0.0f64; k];
    let mut last_change = f64::INFINITY;
    for iter in 1..=max_iter {
        let mut change: f64 = 0.0;

        let mut num = vec![0.0f64; l];
        for c in &stats.cells {
            num[c.worker_cell as usize - 1] +=
                c.share * (c.mean - mu - psi[c.firm_cell as usize - 1]);
        }
        let mut new_alpha: Vec<f64> = (0..l)
            .map(|i| if stats.worker_share[i] > 0.0 { num[i] / stats.worker_share[i] } else { 0.0 })
            .collect();
        let mean_a: f64 = (0..l).map(|i| stats.worker_share[i] * new_alpha[i]).sum();
        for (i, a) in new_alpha.iter_mut().enumerate() {
            *a -= mean_a;
            change = change.max((*a - alpha[i]).abs());
        }
        alpha = new_alpha;

        let mut num = vec![0.0f64; k];
        for c in &stats.cells {
            num[c.firm_cell as usize - 1] +=
                c.share * (c.mean - mu - alpha[c.worker_cell as usize - 1]);
        }
        let mut new_psi: Vec<f64> = (0..k)
            .map(|j| if stats.firm_share[j] > 0.0 { num[j] / stats.firm_share[j] } else { 0.0 })
            .collect();
        let mean_p: f64 = (0..k).map(|j| stats.firm_share[j] * new_psi[j]).sum();
        for (j, p) in new_psi.iter_mut().enumerate() {
            *p -= mean_p;
            change = change.max((*p - psi[j]).abs());
        }
        psi = new_psi;

        last_change = change;
        if change < tol {
            let (alpha, psi, kappa) = effects_from(stats, alpha, psi);
            return Ok(ProjectedEffects {
                alpha,
                psi,
                kappa,
                iterations: iter,
                max_change: change,
                solver: SolverRoute::Backfitting,
            });
        }
    }
    let (alpha, psi, kappa) = effects_from(stats, alpha, psi);
    Err(DecomposeError::NoConvergence {
        iterations: max_iter,
        residual: last_change,
        last: Box::new(ProjectedEffects {
            alpha,
            psi,
            kappa,
            iterations: max_iter,
            max_change: last_change,
            solver: SolverRoute::Backfitting,
        }),
    })
}

/// Direct solve of the projection normal equations. The system has one
/// redundant direction (a constant can shift between α and ψ); the
/// minimum-norm pseudo-inverse solution is re-centered onto the constraint
/// set, which leaves fitted values unchanged.
fn dense_project(stats: &CellStats) -> ProjectedEffects {
    let (l, k) = (stats.l, stats.k);
    let n = l + k;
    let mu = stats.grand_mean;
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for c in &stats.cells {
        let li = c.worker_cell as usize - 1;
        let kj = l + c.firm_cell as usize - 1;
        let d = c.mean - mu;
        m[(li, li)] += c.share;
        m[(kj, kj)] += c.share;
        m[(li, kj)] += c.share;
        m[(kj, li)] += c.share;
        rhs[li] += c.share * d;
        rhs[kj] += c.share * d;
    }
    let eig = m.symmetric_eigen();
    let cut = eig.eigenvalues.amax() * 1e-12;
    let mut x = DVector::<f64>::zeros(n);
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev.abs() > cut {
            let v = eig.eigenvectors.column(i);
            x += v * (v.dot(&rhs) / ev);
        }
    }
    // any least-squares solution already has Σπ_ℓα + Σπ_kψ = 0, so shifting
    // by the α-side weighted mean centers both margins
    let shift: f64 = (0..l).map(|i| stats.worker_share[i] * x[i]).sum();
    let alpha: Vec<f64> = (0..l).map(|i| x[i] - shift).collect();
    let psi: Vec<f64> = (0..k).map(|j| x[l + j] + shift).collect();
    let (alpha, psi, kappa) = effects_from(stats, alpha, psi);
    ProjectedEffects {
        alpha,
        psi,
        kappa,
        iterations: 0,
        max_change: 0.0,
        solver: SolverRoute::DenseFallback,
    }
}

/// The five variance components and their shares of `Var(Y)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub worker: f64,
    pub firm: f64,
    pub sorting: f64,
    pub interaction: f64,
    pub residual: f64,
}

impl VarianceComponents {
    pub fn sum(&self) -> f64 {
        self.worker + self.firm + self.sorting + self.interaction + self.residual
    }
}

/// Observation-level variance decomposition of log wages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decomposition {
    pub total_variance: f64,
    pub components: VarianceComponents,
    /// Components divided by total variance (all zero when wages are
    /// constant).
    pub shares: VarianceComponents,
    /// Relative gap between the component sum and the total variance.
    pub closure_gap: f64,
    /// Within-cell residual `ξ` per row, in input row order.
    #[serde(skip)]
    pub xi: Vec<f64>,
}

/// Decomposes `Var(Y)` over the given rows into worker, firm, sorting,
/// interaction, and residual components, using cell means from `stats` and
/// projected effects from `effects`.
pub fn decompose_variance(
    panel: &Panel,
    rows: &[usize],
    assignments: &[(u32, u32)],
    stats: &CellStats,
    effects: &ProjectedEffects,
) -> Result<Decomposition, DecomposeError> {
    if rows.is_empty() {
        return Err(DecomposeError::EmptyInput);
    }
    if rows.len() != assignments.len() {
        return Err(DecomposeError::LengthMismatch(rows.len(), assignments.len()));
    }
    if effects.kappa.len() != stats.cells.len() {
        return Err(DecomposeError::LengthMismatch(stats.cells.len(), effects.kappa.len()));
    }
    let index = stats.index();
    let n = rows.len();
    let mut a = vec![0.0f64; n];
    let mut p = vec![0.0f64; n];
    let mut c = vec![0.0f64; n];
    let mut xi = vec![0.0f64; n];
    let mut y = vec![0.0f64; n];
    for (i, &r) in rows.iter().enumerate() {
        let (wc, fc) = assignments[i];
        let cell = *index
            .get(&(wc, fc))
            .ok_or(DecomposeError::InvalidCell { worker_cell: wc, firm_cell: fc })?;
        a[i] = effects.alpha[wc as usize - 1];
        p[i] = effects.psi[fc as usize - 1];
        c[i] = effects.kappa[cell];
        y[i] = panel.rows()[r].log_wage;
        xi[i] = y[i] - stats.cells[cell].mean;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mp, mc, my) = (mean(&a), mean(&p), mean(&c), mean(&y));
    let mut var_a = 0.0;
    let mut var_p = 0.0;
    let mut var_c = 0.0;
    let mut var_xi = 0.0;
    let mut var_y = 0.0;
    let mut cov_ap = 0.0;
    for i in 0..n {
        let (da, dp, dc) = (a[i] - ma, p[i] - mp, c[i] - mc);
        var_a += da * da;
        var_p += dp * dp;
        var_c += dc * dc;
        var_xi += xi[i] * xi[i];
        var_y += (y[i] - my) * (y[i] - my);
        cov_ap += da * dp;
    }
    let nf = n as f64;
    // ξ averages to zero within every cell, hence globally; no extra centering
    let components = VarianceComponents {
        worker: var_a / nf,
        firm: var_p / nf,
        sorting: 2.0 * cov_ap / nf,
        interaction: var_c / nf,
        residual: var_xi / nf,
    };
    let total_variance = var_y / nf;
    let shares = if total_variance > 0.0 {
        VarianceComponents {
            worker: components.worker / total_variance,
            firm: components.firm / total_variance,
            sorting: components.sorting / total_variance,
            interaction: components.interaction / total_variance,
            residual: components.residual / total_variance,
        }
    } else {
        VarianceComponents { worker: 0.0, firm: 0.0, sorting: 0.0, interaction: 0.0, residual: 0.0 }
    };
    let closure_gap = if total_variance > 0.0 {
        (components.sum() - total_variance).abs() / total_variance
    } else {
        components.sum().abs()
    };
    Ok(Decomposition { total_variance, components, shares, closure_gap, xi })
}

/// Worker-cell composition of each firm cell: entry `(r, c)` is the share of
/// firm cell `firm_cells[c]`'s rows held by worker cell `worker_cells[r]`.
/// Rows are ordered by ascending `α`, columns by ascending `ψ`; every column
/// sums to one. Cells without rows in `assignments` are omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SortingMatrix {
    pub worker_cells: Vec<u32>,
    pub firm_cells: Vec<u32>,
    /// `worker_cells.len()` rows × `firm_cells.len()` columns.
    pub shares: Vec<Vec<f64>>,
}

pub fn sorting_matrix(assignments: &[(u32, u32)], effects: &ProjectedEffects) -> SortingMatrix {
    let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for &(wc, fc) in assignments {
        *counts.entry((wc, fc)).or_insert(0) += 1;
    }
    let mut worker_cells: Vec<u32> = {
        let mut seen: Vec<u32> = counts.keys().map(|&(wc, _)| wc).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    };
    let mut firm_cells: Vec<u32> = {
        let mut seen: Vec<u32> = counts.keys().map(|&(_, fc)| fc).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    };
    let order_by = |cells: &mut Vec<u32>, values: &[f64]| {
        cells.sort_by(|&x, &y| {
            let (vx, vy) = (values[x as usize - 1], values[y as usize - 1]);
            vx.partial_cmp(&vy).expect("finite effects").then(x.cmp(&y))
        });
    };
    order_by(&mut worker_cells, &effects.alpha);
    order_by(&mut firm_cells, &effects.psi);
    let col_totals: Vec<f64> = firm_cells
        .iter()
        .map(|&fc| {
            counts.iter().filter(|&(&(_, f), _)| f == fc).map(|(_, &n)| n as f64).sum::<f64>()
        })
        .collect();
    let shares: Vec<Vec<f64>> = worker_cells
        .iter()
        .map(|&wc| {
            firm_cells
                .iter()
                .enumerate()
                .map(|(ci, &fc)| {
                    counts.get(&(wc, fc)).map(|&n| n as f64).unwrap_or(0.0) / col_totals[ci]
                })
                .collect()
        })
        .collect();
    SortingMatrix { worker_cells, firm_cells, shares }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnSchema;
    use crate::panel::PanelBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Panel with no covariates: just ids, years, and wages.
    fn bare_panel(wages: &[f64]) -> Panel {
        let mut b = PanelBuilder::new(ColumnSchema::new(vec![]));
        for (i, &w) in wages.iter().enumerate() {
            b.push_row(&format!("w{i:04}"), &format!("f{:03}", i % 7), 2000, w, vec![]).unwrap();
        }
        b.finish().unwrap()
    }

    fn orthogonality_gaps(stats: &CellStats, e: &ProjectedEffects) -> (f64, f64, f64, f64) {
        let mut sum_a = 0.0;
        let mut sum_p = 0.0;
        for (i, &s) in stats.worker_share.iter().enumerate() {
            sum_a += s * e.alpha[i];
        }
        for (j, &s) in stats.firm_share.iter().enumerate() {
            sum_p += s * e.psi[j];
        }
        let mut ak = 0.0;
        let mut pk = 0.0;
        for (c, &kap) in stats.cells.iter().zip(&e.kappa) {
            ak += c.share * e.alpha[c.worker_cell as usize - 1] * kap;
            pk += c.share * e.psi[c.firm_cell as usize - 1] * kap;
        }
        (sum_a, sum_p, ak, pk)
    }

    #[test]
    fn single_cell_stats_and_projection_are_degenerate() {
        let panel = bare_panel(&[1.0, 2.0, 3.0, 6.0]);
        let rows = panel.all_rows();
        let assignments = vec![(1, 1); 4];
        let stats = cell_stats(&panel, &rows, &assignments).unwrap();
        assert_eq!(stats.cells.len(), 1);
        assert_eq!(stats.cells[0].share, 1.0);
        assert_eq!(stats.cells[0].mean, 3.0);
        assert_eq!(stats.grand_mean, 3.0);
        let e = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER).unwrap();
        assert!(e.alpha[0].abs() < 1e-12);
        assert!(e.psi[0].abs() < 1e-12);
        assert!(e.kappa[0].abs() < 1e-12);
    }

    #[test]
    fn balanced_two_by_two_means_and_shares() {
        let panel = bare_panel(&[1.0, 2.0, 2.0, 4.0]);
        let rows = panel.all_rows();
        let assignments = vec![(1, 1), (1, 2), (2, 1), (2, 2)];
        let stats = cell_stats(&panel, &rows, &assignments).unwrap();
        assert_eq!((stats.l, stats.k), (2, 2));
        let idx = stats.index();
        for (&(wc, fc), &i) in &idx {
            assert_eq!(stats.cells[i].share, 0.25);
            let expected = match (wc, fc) {
                (1, 1) => 1.0,
                (1, 2) => 2.0,
                (2, 1) => 2.0,
                (2, 2) => 4.0,
                _ => unreachable!(),
            };
            assert_eq!(stats.cells[i].mean, expected);
        }
        assert_eq!(stats.singleton_cells, 4);
    }

    #[test]
    fn cell_stats_matches_independent_group_by() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let wages: Vec<f64> = (0..500).map(|_| rng.gen_range(-2.0..3.0)).collect();
        let panel = bare_panel(&wages);
        let rows = panel.all_rows();
        let assignments: Vec<(u32, u32)> =
            (0..500).map(|_| (rng.gen_range(1..=4u32), rng.gen_range(1..=3u32))).collect();
        let stats = cell_stats(&panel, &rows, &assignments).unwrap();

        // oracle: hash-map accumulation in reversed row order
        let mut sums: std::collections::HashMap<(u32, u32), (f64, u64)> =
            std::collections::HashMap::new();
        for i in (0..500).rev() {
            let e = sums.entry(assignments[i]).or_insert((0.0, 0));
            e.0 += wages[i];
            e.1 += 1;
        }
        assert_eq!(stats.cells.len(), sums.len());
        for cell in &stats.cells {
            let &(sum, count) = sums.get(&(cell.worker_cell, cell.firm_cell)).unwrap();
            assert!((cell.mean - sum / count as f64).abs() < 1e-12);
            assert!((cell.share - count as f64 / 500.0).abs() < 1e-15);
            assert_eq!(cell.count, count);
        }
        assert!((stats.worker_share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((stats.firm_share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mu: f64 = stats.cells.iter().map(|c| c.share * c.mean).sum();
        assert!((stats.grand_mean - mu).abs() < 1e-10);
    }

    #[test]
    fn additive_means_project_with_zero_interaction() {
        // balanced shares, μ_ℓk = μ + a_ℓ + b_k with centered a, b
        let a = [-0.5, 0.1, 0.4];
        let b = [-0.25, 0.25];
        let mu = 1.7;
        let shares = vec![vec![1.0 / 6.0; 2]; 3];
        let means: Vec<Vec<f64>> =
            a.iter().map(|ai| b.iter().map(|bj| mu + ai + bj).collect()).collect();
        let stats = CellStats::from_matrices(&shares, &means).unwrap();
        let e = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER).unwrap();
        for (got, want) in e.alpha.iter().zip(&a) {
            assert!((got - want).abs() < 1e-9, "alpha {got} vs {want}");
        }
        for (got, want) in e.psi.iter().zip(&b) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!(e.kappa.iter().all(|k| k.abs() < 1e-9));
        assert_eq!(e.solver, SolverRoute::Backfitting);
    }

    /// Diagonal-heavy 2×2 instance solved by hand from the first-order
    /// conditions: by symmetry α = ψ, and the centering constraint pins
    /// α = (−0.75, 0.75).
    #[test]
    fn skewed_two_by_two_matches_direct_solution() {
        let shares = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
        let means = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        let stats = CellStats::from_matrices(&shares, &means).unwrap();
        assert!((stats.grand_mean - 2.4).abs() < 1e-12);
        let e = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER).unwrap();
        let expect_alpha = [-0.75, 0.75];
        let expect_kappa = [0.1, -0.4, -0.4, 0.1]; // cells (1,1),(1,2),(2,1),(2,2)
        for (got, want) in e.alpha.iter().zip(&expect_alpha) {
            assert!((got - want).abs() < 1e-8, "alpha {got} vs {want}");
        }
        for (got, want) in e.psi.iter().zip(&expect_alpha) {
            assert!((got - want).abs() < 1e-8);
        }
        for (got, want) in e.kappa.iter().zip(&expect_kappa) {
            assert!((got - want).abs() < 1e-8);
        }

        // dense route forced by an impossible sweep budget must agree
        let dense = project_additive(&stats, PROJECTION_TOL, 1).unwrap();
        assert_eq!(dense.solver, SolverRoute::DenseFallback);
        for (got, want) in dense.alpha.iter().zip(&expect_alpha) {
            assert!((got - want).abs() < 1e-10);
        }
        for (got, want) in dense.kappa.iter().zip(&expect_kappa) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn oversized_grid_propagates_nonconvergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shares = vec![vec![1.0; 70]; 70];
        let means: Vec<Vec<f64>> =
            (0..70).map(|_| (0..70).map(|_| rng.gen_range(0.0..2.0)).collect()).collect();
        let stats = CellStats::from_matrices(&shares, &means).unwrap();
        assert!(stats.l * stats.k > DENSE_FALLBACK_MAX_CELLS);
        match project_additive(&stats, 1e-15, 0) {
            Err(DecomposeError::NoConvergence { iterations, last, .. }) => {
                assert_eq!(iterations, 0);
                assert_eq!(last.alpha.len(), 70);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn random_projections_satisfy_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let l = rng.gen_range(2..6);
            let k = rng.gen_range(2..6);
            let shares: Vec<Vec<f64>> = (0..l)
                .map(|_| (0..k).map(|_| rng.gen_range(0.05..1.0)).collect())
                .collect();
            let means: Vec<Vec<f64>> = (0..l)
                .map(|_| (0..k).map(|_| rng.gen_range(-1.0..3.0)).collect())
                .collect();
            let stats = CellStats::from_matrices(&shares, &means).unwrap();
            let e = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER).unwrap();
            let (sa, sp, ak, pk) = orthogonality_gaps(&stats, &e);
            assert!(sa.abs() < 1e-8, "trial {trial}: Σπα = {sa}");
            assert!(sp.abs() < 1e-8, "trial {trial}: Σπψ = {sp}");
            assert!(ak.abs() < 1e-8, "trial {trial}: Σπακ = {ak}");
            assert!(pk.abs() < 1e-8, "trial {trial}: Σπψκ = {pk}");
        }
    }

    #[test]
    fn balanced_shares_reduce_to_conditional_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pw = [0.3, 0.7];
        let pf = [0.25, 0.35, 0.4];
        let shares: Vec<Vec<f64>> =
            pw.iter().map(|a| pf.iter().map(|b| a * b).collect()).collect();
        let means: Vec<Vec<f64>> =
            (0..2).map(|_| (0..3).map(|_| rng.gen_range(0.0..2.0)).collect()).collect();
        let stats = CellStats::from_matrices(&shares, &means).unwrap();
        let e = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER).unwrap();
        for li in 0..2 {
            let conditional: f64 = (0..3).map(|ki| pf[ki] * means[li][ki]).sum();
            assert!((e.alpha[li] - (conditional - stats.grand_mean)).abs() < 1e-8);
        }
    }

    #[test]
    fn decomposition_closes_and_residual_centers_within_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let wages: Vec<f64> = (0..400).map(|_| rng.gen_range(0.0..4.0)).collect();
        let panel = bare_panel(&wages);
        let rows = panel.all_rows();
        let assignments: Vec<(u32, u32)> =
            (0..400).map(|_| (rng.gen_range(1..=3u32), rng.gen_range(1..=4u32))).collect();
        let stats = cell_stats(&panel, &rows, &assignments).unwrap();
        let effects = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER).unwrap();
        let d = decompose_variance(&panel, &rows, &assignments, &stats, &effects).unwrap();
        assert!(d.closure_gap < 1e-6, "closure gap {}", d.closure_gap);
        assert!(
            (d.shares.sum() - 1.0).abs() < 1e-6,
            "shares sum {}",
            d.shares.sum()
        );
        // within-cell residual means
        let mut by_cell: BTreeMap<(u32, u32), (f64, u64)> = BTreeMap::new();
        for (i, &cell) in assignments.iter().enumerate() {
            let e = by_cell.entry(cell).or_insert((0.0, 0));
            e.0 += d.xi[i];
            e.1 += 1;
        }
        for ((wc, fc), (sum, count)) in by_cell {
            assert!(
                (sum / count as f64).abs() < 1e-10,
                "cell ({wc},{fc}) residual mean {}",
                sum / count as f64
            );
        }
    }

    #[test]
    fn noiseless_additive_panel_has_zero_interaction_and_residual() {
        let a = [-0.5, 0.5];
        let b = [-0.25, 0.25];
        let mut wages = Vec::new();
        let mut assignments = Vec::new();
        for li in 0..2 {
            for ki in 0..2 {
                for _ in 0..25 {
                    wages.push(2.0 + a[li] + b[ki]);
                    assignments.push((li as u32 + 1, ki as u32 + 1));
                }
            }
        }
        let panel = bare_panel(&wages);
        let rows = panel.all_rows();
        let stats = cell_stats(&panel, &rows, &assignments).unwrap();
        let effects = project_additive(&stats, PROJECTION_TOL, PROJECTION_MAX_ITER).unwrap();
        let d = decompose_variance(&panel, &rows, &assignments, &stats, &effects).unwrap();
        assert!(d.components.interaction.abs() < 1e-10);
        assert!(d.components.residual.abs() < 1e-12);
        assert!((d.components.worker - 0.25).abs() < 1e-9);
        assert!((d.components.firm - 0.0625).abs() < 1e-9);
        assert!(d.components.sorting.abs() < 1e-9);
        assert!(d.closure_gap < 1e-10);
    }

    #[test]
    fn sorting_matrix_orders_cells_by_effects_and_columns_sum_to_one() {
        // perfect 1:1 sorting on three cells
        let assignments: Vec<(u32, u32)> =
            (0..300).map(|i| ((i % 3 + 1) as u32, (i % 3 + 1) as u32)).collect();
        let effects = ProjectedEffects {
            alpha: vec![0.5, -0.5, 0.0],
            psi: vec![0.5, -0.5, 0.0],
            kappa: vec![],
            iterations: 1,
            max_change: 0.0,
            solver: SolverRoute::Backfitting,
        };
        let m = sorting_matrix(&assignments, &effects);
        assert_eq!(m.worker_cells, vec![2, 3, 1]); // ascending α
        assert_eq!(m.firm_cells, vec![2, 3, 1]);
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert_eq!(m.shares[r][c], want);
            }
        }

        // independent assignment: columns match the worker marginal
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let assignments: Vec<(u32, u32)> = (0..60_000)
            .map(|_| (rng.gen_range(1..=3u32), rng.gen_range(1..=3u32)))
            .collect();
        let m = sorting_matrix(&assignments, &effects);
        for col in 0..3 {
            let total: f64 = (0..3).map(|r| m.shares[r][col]).sum();
            assert!((total - 1.0).abs() < 1e-10);
            for r in 0..3 {
                assert!((m.shares[r][col] - 1.0 / 3.0).abs() < 0.02);
            }
        }
    }
}
