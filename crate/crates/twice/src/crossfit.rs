//! Two-way blocked cross-fitting.
//!
//! Workers and firms are independently assigned to `b` blocks, giving a
//! `b x b` grid of fold cells. The model that predicts rows of cell `(a, b)`
//! is trained on the complement: rows whose worker block differs from `a`
//! AND whose firm block differs from `b`. No training row shares a worker or
//! a firm with any test row, which is what keeps out-of-fold predictions
//! honest in the presence of worker- and firm-level dependence.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::FeatureMatrix;
use crate::model::{Fitted, Learner, ModelError, TrainSet};
use crate::panel::Panel;

#[derive(Debug, Error)]
pub enum CrossfitError {
    #[error("fold count must be between 2 and 255, got {0}")]
    InvalidBlockCount(usize),
    #[error("{0} rows but {1} cell assignments")]
    LengthMismatch(usize, usize),
    #[error("training complement of fold cell ({0}, {1}) is empty")]
    EmptyTrainingCell(u8, u8),
    #[error("featurization failed: {0}")]
    Featurize(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Block assignments for every worker and firm, plus the per-row fold cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub b: usize,
    /// Block per worker key index (only keys present in the panel are
    /// meaningful).
    pub worker_block: Vec<u8>,
    /// Block per firm key index.
    pub firm_block: Vec<u8>,
    /// `(worker_block, firm_block)` per panel row.
    pub row_cell: Vec<(u8, u8)>,
}

/// String-keyed form of a [`FoldPlan`] for the JSON artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlanArtifact {
    pub b: usize,
    pub workers: BTreeMap<String, u8>,
    pub firms: BTreeMap<String, u8>,
}

/// Assigns workers and firms to blocks: ids are sorted, shuffled with the
/// seed, and dealt round-robin, so block sizes differ by at most one and the
/// plan is a pure function of (panel ids, b, seed).
pub fn make_fold_plan(panel: &Panel, b: usize, seed: u64) -> Result<FoldPlan, CrossfitError> {
    if !(2..=255).contains(&b) {
        return Err(CrossfitError::InvalidBlockCount(b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    fn deal(sorted_keys: &mut Vec<u32>, table_len: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        sorted_keys.shuffle(rng);
        let mut block = vec![0u8; table_len];
        for (i, &k) in sorted_keys.iter().enumerate() {
            block[k as usize] = (i % b) as u8;
        }
        block
    }

    let mut workers: Vec<u32> = panel.present_worker_keys().iter().map(|k| k.0).collect();
    workers.sort_by(|&x, &y| {
        panel.worker_id(crate::panel::WorkerKey(x)).cmp(panel.worker_id(crate::panel::WorkerKey(y)))
    });
    let worker_block = deal(&mut workers, panel.worker_key_count(), b, &mut rng);
    let mut firms: Vec<u32> = panel.present_firm_keys().iter().map(|k| k.0).collect();
    firms.sort_by(|&x, &y| {
        panel.firm_id(crate::panel::FirmKey(x)).cmp(panel.firm_id(crate::panel::FirmKey(y)))
    });
    let firm_block = deal(&mut firms, panel.firm_key_count(), b, &mut rng);

    let row_cell = panel
        .rows()
        .iter()
        .map(|obs| (worker_block[obs.worker.0 as usize], firm_block[obs.firm.0 as usize]))
        .collect();
    Ok(FoldPlan { b, worker_block, firm_block, row_cell })
}

impl FoldPlan {
    pub fn to_artifact(&self, panel: &Panel) -> FoldPlanArtifact {
        let workers = panel
            .present_worker_keys()
            .into_iter()
            .map(|k| (panel.worker_id(k).to_string(), self.worker_block[k.0 as usize]))
            .collect();
        let firms = panel
            .present_firm_keys()
            .into_iter()
            .map(|k| (panel.firm_id(k).to_string(), self.firm_block[k.0 as usize]))
            .collect();
        FoldPlanArtifact { b: self.b, workers, firms }
    }
}

/// One fitted fold-cell model.
pub struct CellModel {
    pub worker_block: u8,
    pub firm_block: u8,
    pub model: Box<dyn Fitted>,
    pub n_train: usize,
    pub n_test: usize,
}

pub struct CrossfitResult {
    /// Out-of-fold prediction for every row.
    pub oof: Vec<f64>,
    /// Models in ascending (worker_block, firm_block) order, one per
    /// nonempty fold cell.
    pub models: Vec<CellModel>,
    /// Fold cells containing no rows.
    pub cells_skipped: usize,
}

/// Fits one model per nonempty fold cell on that cell's training complement
/// and collects out-of-fold predictions. `cells` assigns each feature row to
/// its fold cell; `groups` (e.g. worker keys) are forwarded to the learner
/// for its internal validation carve.
pub fn crossfit_predict(
    features: &FeatureMatrix,
    targets: &[f64],
    groups: Option<&[u32]>,
    cells: &[(u8, u8)],
    b: usize,
    learner: &dyn Learner,
) -> Result<CrossfitResult, CrossfitError> {
    let n = features.n_rows();
    if cells.len() != n {
        return Err(CrossfitError::LengthMismatch(n, cells.len()));
    }
    let mut oof = vec![f64::NAN; n];
    let mut models = Vec::new();
    let mut cells_skipped = 0usize;

    for a in 0..b as u8 {
        for bb in 0..b as u8 {
            let test_rows: Vec<usize> =
                (0..n).filter(|&r| cells[r] == (a, bb)).collect();
            if test_rows.is_empty() {
                cells_skipped += 1;
                continue;
            }
            let train_rows: Vec<usize> =
                (0..n).filter(|&r| cells[r].0 != a && cells[r].1 != bb).collect();
            if train_rows.is_empty() {
                return Err(CrossfitError::EmptyTrainingCell(a, bb));
            }
            let tm = features.select_rows(&train_rows);
            let tt: Vec<f64> = train_rows.iter().map(|&r| targets[r]).collect();
            let tg: Option<Vec<u32>> =
                groups.map(|g| train_rows.iter().map(|&r| g[r]).collect());
            let fitted = learner.fit(&TrainSet {
                features: &tm,
                targets: &tt,
                groups: tg.as_deref(),
                validation: None,
            })?;
            let vm = features.select_rows(&test_rows);
            let preds = fitted.predict(&vm)?;
            for (i, &r) in test_rows.iter().enumerate() {
                oof[r] = preds[i];
            }
            models.push(CellModel {
                worker_block: a,
                firm_block: bb,
                model: fitted,
                n_train: train_rows.len(),
                n_test: test_rows.len(),
            });
        }
    }
    debug_assert!(oof.iter().all(|p| p.is_finite()), "some rows were never predicted");
    Ok(CrossfitResult { oof, models, cells_skipped })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RiskReport {
    /// Unweighted mean over nonempty fold cells of the per-cell MSE.
    pub loss: f64,
    pub cells_used: usize,
}

/// Blocked risk of out-of-fold predictions: per-cell MSEs averaged with
/// equal cell weights, so populous cells do not dominate.
pub fn blocked_risk(
    predictions: &[f64],
    targets: &[f64],
    cells: &[(u8, u8)],
    b: usize,
) -> RiskReport {
    assert_eq!(predictions.len(), targets.len());
    assert_eq!(predictions.len(), cells.len());
    let mut sums = vec![(0.0f64, 0usize); b * b];
    for ((p, t), &(a, bb)) in predictions.iter().zip(targets).zip(cells) {
        let e = p - t;
        let slot = &mut sums[a as usize * b + bb as usize];
        slot.0 += e * e;
        slot.1 += 1;
    }
    let mut loss = 0.0;
    let mut cells_used = 0usize;
    for (sse, count) in sums {
        if count > 0 {
            loss += sse / count as f64;
            cells_used += 1;
        }
    }
    RiskReport { loss: if cells_used > 0 { loss / cells_used as f64 } else { f64::NAN }, cells_used }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRow {
    /// Firm cell count.
    pub k: usize,
    /// Worker cell count.
    pub l: usize,
    pub loss: f64,
    pub cells_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneResult {
    /// Selected firm cell count.
    pub k: usize,
    /// Selected worker cell count.
    pub l: usize,
    pub table: Vec<TuneRow>,
}

/// Evaluates the blocked risk for every `(k, l)` pair on the grid — `k` firm
/// cells, `l` worker cells — and picks the minimizer (ties: smaller k, then
/// smaller l).
///
/// `featurize(train_rows, k, l)` must build a feature matrix covering ALL
/// panel rows while learning anything it learns (partitions included) from
/// `train_rows` only; it is called once per fold cell per grid point, so
/// nothing estimated on a test row ever informs the model that predicts it.
pub fn tune_grid<F>(
    panel: &Panel,
    plan: &FoldPlan,
    grid: &[(usize, usize)],
    learner: &dyn Learner,
    mut featurize: F,
) -> Result<TuneResult, CrossfitError>
where
    F: FnMut(&[usize], usize, usize) -> Result<FeatureMatrix, CrossfitError>,
{
    let n = panel.n_rows();
    let all = panel.all_rows();
    let targets: Vec<f64> = panel.wages(&all);
    let groups: Vec<u32> = panel.rows().iter().map(|o| o.worker.0).collect();
    let cells = &plan.row_cell;
    let b = plan.b;

    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, usize, usize)> = None;
    for &(k, l) in grid {
        let mut oof = vec![f64::NAN; n];
        for a in 0..b as u8 {
            for bb in 0..b as u8 {
                let test_rows: Vec<usize> =
                    (0..n).filter(|&r| cells[r] == (a, bb)).collect();
                if test_rows.is_empty() {
                    continue;
                }
                let train_rows: Vec<usize> =
                    (0..n).filter(|&r| cells[r].0 != a && cells[r].1 != bb).collect();
                if train_rows.is_empty() {
                    return Err(CrossfitError::EmptyTrainingCell(a, bb));
                }
                let features = featurize(&train_rows, k, l)?;
                if features.n_rows() != n {
                    return Err(CrossfitError::LengthMismatch(n, features.n_rows()));
                }
                let tm = features.select_rows(&train_rows);
                let tt: Vec<f64> = train_rows.iter().map(|&r| targets[r]).collect();
                let tg: Vec<u32> = train_rows.iter().map(|&r| groups[r]).collect();
                let fitted = learner.fit(&TrainSet {
                    features: &tm,
                    targets: &tt,
                    groups: Some(&tg),
                    validation: None,
                })?;
                let vm = features.select_rows(&test_rows);
                let preds = fitted.predict(&vm)?;
                for (i, &r) in test_rows.iter().enumerate() {
                    oof[r] = preds[i];
                }
            }
        }
        let risk = blocked_risk(&oof, &targets, cells, b);
        log::info!("tuning k={k} l={l}: blocked risk {:.6} over {} cells", risk.loss, risk.cells_used);
        table.push(TuneRow { k, l, loss: risk.loss, cells_used: risk.cells_used });
        let better = match best {
            None => true,
            Some((bl, bk, blf)) => {
                risk.loss < bl || (risk.loss == bl && (k, l) < (bk, blf))
            }
        };
        if better {
            best = Some((risk.loss, k, l));
        }
    }
    let (_, k, l) = best.expect("grid must be nonempty");
    Ok(TuneResult { k, l, table })
}
