//! Temporary probe for the cross-fit leakage experiment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twice::crossfit::{crossfit_predict, make_fold_plan};
use twice::model::{Learner, TrainSet, TreeLearner};
use twice::synth::{generate, SyntheticSpec};
use twice::tree::TreeFitConfig;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut c = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    c / (va.sqrt() * vb.sqrt())
}

fn run(label: &str, spec: &SyntheticSpec, max_leaves: usize) {
    let (panel, truth) = generate(spec).expect("generate");
    let rows = panel.all_rows();
    let features = panel.wage_matrix(&rows, None);
    let targets = panel.wages(&rows);
    let learner = TreeLearner::new(TreeFitConfig {
        max_leaves,
        max_depth: 64,
        min_leaf_size: 1.0,
        numeric_candidates: 255,
        seed: 0,
    });
    let plan = make_fold_plan(&panel, 5, 54).expect("plan");
    let result = crossfit_predict(&features, &targets, None, &plan.row_cell, 5, &learner)
        .expect("cross-fit");
    let blocked = pearson(&result.oof, &truth.noise);

    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(55));
    let mut fold_of = vec![0usize; n];
    for (i, &r) in order.iter().enumerate() {
        fold_of[r] = i % 5;
    }
    let mut naive = vec![f64::NAN; n];
    for fold in 0..5usize {
        let test: Vec<usize> = (0..n).filter(|&r| fold_of[r] == fold).collect();
        let train: Vec<usize> = (0..n).filter(|&r| fold_of[r] != fold).collect();
        let tm = features.select_rows(&train);
        let tt: Vec<f64> = train.iter().map(|&r| targets[r]).collect();
        let fitted = learner
            .fit(&TrainSet { features: &tm, targets: &tt, groups: None, validation: None })
            .expect("fit");
        let preds = fitted.predict(&features.select_rows(&test)).expect("predict");
        for (i, &r) in test.iter().enumerate() {
            naive[r] = preds[i];
        }
    }
    let naive_corr = pearson(&naive, &truth.noise);
    println!("{label}: blocked={blocked:+.4} naive={naive_corr:+.4}");
}

fn main() {
    let base = SyntheticSpec {
        n_workers: 10_000,
        n_firms: 2_500,
        n_years: 5,
        worker_type_count: 4,
        firm_type_count: 1,
        sorting_strength: 0.0,
        interaction_scale: 0.0,
        noise_sd: 0.15,
        seed: 53,
        worker_noise_sd: 0.10,
        firm_noise_sd: 0.30,
        move_rate: 0.25,
    };
    let e = SyntheticSpec { n_firms: 500, ..base.clone() };
    run("E  500f wt4 eta.30", &e, 16_384);
    let f = SyntheticSpec { n_firms: 750, ..base.clone() };
    run("F  750f wt4 eta.30", &f, 16_384);
}
