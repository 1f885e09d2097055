use bitalloc_core::allocator::{
    build_t2, feature_mse, kld_allocation, mse_allocation, EstimatorChoice, FeasibleConstraint, KldScorer,
};
use bitalloc_core::dataset::Dataset;
use bitalloc_core::divergence::{HistogramConfig, KnnConfig};
use bitalloc_core::mlu::MlpModel;
use bitalloc_core::quantizer::{QuantizerBank, QuantizerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inputs already sitting on the 4-bit grid, outputs from the model itself.
fn grid_aligned() -> (Dataset, MlpModel, QuantizerBank) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = MlpModel::xavier(2, 5, &mut rng);
    let bank = QuantizerBank::new(vec![
        QuantizerSpec::new(0, 0.0, 1.0, 4).unwrap(),
        QuantizerSpec::new(1, -2.0, 2.0, 4).unwrap(),
    ])
    .unwrap();
    let rows: Vec<Vec<f64>> = (0..3000)
        .map(|_| {
            let x: Vec<f64> =
                bank.specs().iter().map(|s| s.quantize(rng.random_range(s.min()..=s.max())).unwrap()).collect();
            let y = model.predict(&x);
            vec![x[0], x[1], y]
        })
        .collect();
    (Dataset::from_rows(&["a", "b", "y"], &rows).unwrap(), model, bank)
}

fn constraint() -> FeasibleConstraint {
    FeasibleConstraint { lo: 1, hi: 4, sum: 8, reserved: Vec::new() }
}

#[test]
fn identity_resolution_reproduces_t1() {
    let (t1, model, bank) = grid_aligned();
    let t2 = build_t2(&t1, &[4, 4], &bank, &model).unwrap();
    assert_eq!(t1.as_slice(), t2.as_slice());
    assert_eq!(feature_mse(&t1, &[4, 4], &bank).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn identity_resolution_scores_zero() {
    let (t1, model, bank) = grid_aligned();
    let c = constraint();
    let feasible = c.enumerate(2);
    assert_eq!(feasible.len(), 1);
    let cfg = HistogramConfig::from_data(&t1, vec![4, 4, 8]).unwrap();
    let scorer = KldScorer::new(&t1, &EstimatorChoice::Histogram(cfg)).unwrap();
    let table = kld_allocation(&t1, &model, &bank, &c, &feasible, &scorer).unwrap();
    assert_eq!(table.best().unwrap().score, 0.0);
    let mse = mse_allocation(&t1, &bank, &c, &feasible).unwrap();
    assert_eq!(mse.best().unwrap().score, 0.0);
}

#[test]
fn coarser_candidates_score_worse() {
    let (t1, model, bank) = grid_aligned();
    let c = FeasibleConstraint { sum: 6, ..constraint() };
    let feasible = c.enumerate(2);
    let cfg = HistogramConfig::from_data(&t1, vec![16, 16, 8]).unwrap();
    let scorer = KldScorer::new(&t1, &EstimatorChoice::Histogram(cfg)).unwrap();
    let table = kld_allocation(&t1, &model, &bank, &c, &feasible, &scorer).unwrap();
    assert_eq!(table.entries.len(), 3);
    assert!(table.entries.iter().all(|e| e.score > 0.0 && e.score.is_finite()));

    let knn = KldScorer::new(&t1, &EstimatorChoice::Knn(KnnConfig::new(20))).unwrap();
    let table = kld_allocation(&t1, &model, &bank, &c, &feasible, &knn).unwrap();
    assert!(table.entries.iter().all(|e| e.score.is_finite()));
}

#[test]
fn mse_objective_shrinks_with_budget() {
    let (t1, _, bank) = grid_aligned();
    let mut prev = f64::INFINITY;
    for sum in 2..=8 {
        let c = FeasibleConstraint { sum, ..constraint() };
        let best = mse_allocation(&t1, &bank, &c, &c.enumerate(2)).unwrap().best().unwrap().score;
        assert!(best <= prev, "sum {sum}: {best} > {prev}");
        prev = best;
    }
}
