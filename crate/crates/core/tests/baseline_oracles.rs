//! Baselines against closed forms and dense linear algebra.

use liveval::baselines::{gradnd_value, if_value_with_test_grad, loo_value, CheckpointCollector, IfConfig};
use liveval::dataio::{synth_gaussian_blobs, Dataset};
use liveval::model::{LossKind, Model, ModelSpec};
use liveval::numkit::{gaussian_draw, RngState};
use liveval::trainer::{LrSchedule, Sampling, TrainConfig, Trainer};
use nalgebra::{DMatrix, DVector};

/// Mean of `0.5 (w x - 1)^2` over `xs`.
fn ls_loss(w: f64, xs: &[f64]) -> f64 {
    xs.iter().map(|x| 0.5 * (w * x - 1.0).powi(2)).sum::<f64>() / xs.len() as f64
}

#[test]
fn loo_matches_least_squares_closed_form() {
    let xs: Vec<f64> = gaussian_draw(&RngState::new(31), 12, 1.0).unwrap().iter().map(|v| v + 1.0).collect();
    let n = xs.len();
    let ds = Dataset::new(xs.clone(), 1, vec![0; n], 1).unwrap();
    let model = Model::new(ModelSpec::mlp(vec![1, 1]).with_loss(LossKind::Mse).without_bias()).unwrap();
    // Full-batch gradient descent; the LOO runs use the remaining n - 1 rows.
    let cfg = TrainConfig {
        total_steps: 3000,
        batch_size: n,
        lr: LrSchedule::Constant { lr: 0.3 },
        rng: RngState::new(2),
        sampling: Sampling::EpochPermutation,
        init_seed: None,
    };
    let pool: Vec<usize> = (0..n).collect();
    let result = loo_value(&model, &ds, &cfg, &pool).unwrap();

    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let w_full = sx / sxx;
    for i in 0..n {
        let w_minus = (sx - xs[i]) / (sxx - xs[i] * xs[i]);
        let expect = ls_loss(w_minus, &xs) - ls_loss(w_full, &xs);
        let got = result.values[&i];
        assert!((got - expect).abs() < 1e-6, "row {i}: {got} vs {expect}");
        assert!(got >= -1e-12, "removing a row cannot lower the full-data optimum's loss");
    }
}

fn linear_problem(seed: u64) -> (Model, Dataset, Vec<f64>, Vec<f64>) {
    let rng = RngState::new(seed);
    let (f, c, n) = (6, 3, 40);
    let feats = gaussian_draw(&rng.split(1), n * f, 1.0).unwrap();
    let labels = (0..n).map(|i| (i * 7) % c).collect();
    let ds = Dataset::new(feats, f, labels, c).unwrap();
    let model = Model::new(ModelSpec::logistic(f, c).with_loss(LossKind::Mse)).unwrap();
    assert!(model.dim() <= 50);
    let theta = gaussian_draw(&rng.split(2), model.dim(), 0.3).unwrap();
    let g_test = gaussian_draw(&rng.split(3), model.dim(), 1.0).unwrap();
    (model, ds, theta, g_test)
}

/// Dense Hessian of the mean loss, column by column from analytic gradients.
/// Exact up to rounding for a loss that is quadratic in the parameters.
fn dense_hessian(model: &Model, ds: &Dataset, theta: &[f64]) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..ds.len()).collect();
    let d = model.dim();
    let base = model.batch_grad(theta, ds, &rows).unwrap();
    let mut h = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut p = theta.to_vec();
        p[k] += 1.0;
        let g = model.batch_grad(&p, ds, &rows).unwrap();
        for r in 0..d {
            h[(r, k)] = g[r] - base[r];
        }
    }
    (&h + h.transpose()) * 0.5
}

#[test]
fn influence_matches_direct_solve() {
    let (model, ds, theta, g_test) = linear_problem(4);
    let lambda = 0.01;
    let h = dense_hessian(&model, &ds, &theta) + DMatrix::identity(model.dim(), model.dim()) * lambda;
    let s = h.lu().solve(&DVector::from_vec(g_test.clone())).unwrap();
    let pool: Vec<usize> = (0..ds.len()).collect();
    let cfg = IfConfig { damping: lambda, tolerance: 1e-10, ..IfConfig::default() };
    let out = if_value_with_test_grad(&model, &ds, &theta.clone().into(), &pool, &g_test, &cfg).unwrap();
    for &i in &pool {
        let g = DVector::from_vec(model.per_sample_grad(&theta, ds.row(i), ds.label(i)).unwrap());
        let expect = -s.dot(&g);
        assert!((out.values[&i] - expect).abs() < 1e-6, "row {i}: {} vs {expect}", out.values[&i]);
    }
    assert_eq!(out.details["solver"], "cg");
}

#[test]
fn influence_shrinks_with_damping() {
    for seed in 0..5 {
        let (model, ds, theta, g_test) = linear_problem(100 + seed);
        let pool: Vec<usize> = (0..ds.len()).collect();
        let mut last = f64::INFINITY;
        for lambda in [0.01, 0.1, 1.0, 10.0, 100.0, 1e4] {
            let cfg = IfConfig { damping: lambda, ..IfConfig::default() };
            let out = if_value_with_test_grad(&model, &ds, &theta.clone().into(), &pool, &g_test, &cfg).unwrap();
            let sup = out.values.values().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(sup <= last, "seed {seed} λ {lambda}: {sup} > {last}");
            last = sup;
        }
        assert!(last < 1e-2, "values should vanish for large damping, got {last}");
    }
}

#[test]
fn gradnd_averages_gradient_norms_over_first_epoch() {
    let ds = synth_gaussian_blobs(&RngState::new(6), 20, 2, 3, 2.0).unwrap();
    let model = Model::new(ModelSpec::logistic(3, 2)).unwrap();
    let cfg = TrainConfig {
        total_steps: 12,
        batch_size: 8,
        lr: LrSchedule::Constant { lr: 0.1 },
        rng: RngState::new(6),
        sampling: Sampling::EpochPermutation,
        init_seed: None,
    };
    let mut collector = CheckpointCollector::first_epoch();
    Trainer::new(&model, &ds, &cfg).run(&mut [&mut collector]).unwrap();
    assert_eq!(collector.steps_taken, vec![1, 2, 3, 4, 5]);
    let pool = [0, 5, 39];
    let out = gradnd_value(&model, &ds, &collector.checkpoints, &pool).unwrap();
    for &i in &pool {
        let mean = collector
            .checkpoints
            .iter()
            .map(|p| {
                let g = model.per_sample_grad(p, ds.row(i), ds.label(i)).unwrap();
                g.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / 5.0;
        assert!((out.values[&i] - mean).abs() < 1e-14);
    }
}
