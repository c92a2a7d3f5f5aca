//! Comparison valuations: leave-one-out retraining, influence functions and
//! GradNd. All of them report values for an explicit pool of row positions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::model::{Model, ParamVector};
use crate::numkit::{dot, norm2_unchecked};
use crate::resources::{measure, ResourceStats};
use crate::trainer::{StepContext, StepRecord, TrainConfig, TrainHook, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    Loo,
    If,
    Gradnd,
}

impl BaselineMethod {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Loo => "loo",
            BaselineMethod::If => "if",
            BaselineMethod::Gradnd => "gradnd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    /// Row position → value, exactly the requested pool.
    pub values: BTreeMap<usize, f64>,
    pub resources: ResourceStats,
    /// Method-specific bookkeeping (damping, CG statistics, checkpoints...).
    pub details: serde_json::Value,
}

fn check_pool(dataset: &Dataset, pool: &[usize]) -> Result<()> {
    if let Some(&bad) = pool.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::Parameter(format!(
            "pool row {bad} not in dataset of {} rows",
            dataset.len()
        )));
    }
    Ok(())
}

/// `L(D \ {i}) - L(D)` with both losses measured on the full training set.
///
/// Every retraining starts from the same initial parameters and batch
/// stream; the removed row is skipped and its slot backfilled.
pub fn loo_value(
    model: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
    pool: &[usize],
) -> Result<BaselineResult> {
    check_pool(dataset, pool)?;
    let (values, resources) = measure(|| -> Result<BTreeMap<usize, f64>> {
        let full = Trainer::new(model, dataset, config).run(&mut [])?;
        let base = model.dataset_loss(&full.final_params, dataset)?;
        let mut values = BTreeMap::new();
        for &i in pool {
            let out = Trainer::new(model, dataset, config)
                .excluding(i)
                .initial_params(full.initial_params.clone())
                .run(&mut [])?;
            values.insert(i, model.dataset_loss(&out.final_params, dataset)? - base);
        }
        Ok(values)
    });
    Ok(BaselineResult {
        method: BaselineMethod::Loo,
        values: values?,
        resources,
        details: serde_json::json!({
            "loss": "mean training-set loss at the final step",
            "retrainings": pool.len(),
        }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IfConfig {
    pub damping: f64,
    /// Relative residual `‖r‖ / ‖b‖` at which CG stops.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Size of the clean held-out batch whose mean gradient is the test gradient.
    pub test_batch: usize,
}

impl Default for IfConfig {
    fn default() -> Self {
        Self {
            damping: 0.01,
            tolerance: 1e-6,
            max_iterations: 200,
            test_batch: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Conjugate gradient for a symmetric positive-definite operator.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, CgStats)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = norm2_unchecked(b);
    if b_norm == 0.0 {
        return Ok((x, CgStats { iterations: 0, residual: 0.0 }));
    }
    let target = tolerance * b_norm;
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r)?;
    for it in 1..=max_iterations {
        let ap = apply(&p)?;
        ensure_len(n, ap.len())?;
        let pap = dot(&p, &ap)?;
        if !(pap > 0.0) {
            return Err(Error::Numeric(format!(
                "operator not positive definite along search direction (pAp = {pap:e})"
            )));
        }
        let alpha = rr / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let rr_new = dot(&r, &r)?;
        let residual = rr_new.sqrt();
        if residual <= target {
            return Ok((
                x,
                CgStats {
                    iterations: it,
                    residual: residual / b_norm,
                },
            ));
        }
        let beta = rr_new / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_new;
    }
    Err(Error::Solver {
        iterations: max_iterations,
        residual: rr.sqrt() / b_norm,
    })
}

/// MINRES for a symmetric, possibly indefinite operator.
///
/// Used when CG meets non-positive curvature, which happens for damped
/// Hessians of non-convex models.
pub fn minres(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, CgStats)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let beta1 = norm2_unchecked(b);
    if beta1 == 0.0 {
        return Ok((x, CgStats { iterations: 0, residual: 0.0 }));
    }
    let mut r1 = b.to_vec();
    let mut r2 = b.to_vec();
    let mut y = b.to_vec();
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0, 0.0);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    for it in 1..=max_iterations {
        let v: Vec<f64> = y.iter().map(|e| e / beta).collect();
        y = apply(&v)?;
        ensure_len(n, y.len())?;
        if it >= 2 {
            for k in 0..n {
                y[k] -= (beta / oldb) * r1[k];
            }
        }
        let alfa = dot(&v, &y)?;
        for k in 0..n {
            y[k] -= (alfa / beta) * r2[k];
        }
        r1 = std::mem::replace(&mut r2, y.clone());
        oldb = beta;
        beta = norm2_unchecked(&y);
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let w1 = std::mem::replace(&mut w2, w.clone());
        for k in 0..n {
            w[k] = (v[k] - oldeps * w1[k] - delta * w2[k]) / gamma;
            x[k] += phi * w[k];
        }
        if !phibar.is_finite() {
            return Err(Error::Numeric("MINRES residual became non-finite".into()));
        }
        if phibar <= tolerance * beta1 || beta == 0.0 {
            return Ok((
                x,
                CgStats {
                    iterations: it,
                    residual: phibar / beta1,
                },
            ));
        }
    }
    Err(Error::Solver {
        iterations: max_iterations,
        residual: phibar / beta1,
    })
}

/// CG, falling back to MINRES when CG meets non-positive curvature or does
/// not converge.
/// Returns the solver name alongside the solution.
pub fn solve_symmetric(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<(Vec<f64>, CgStats, &'static str)> {
    match conjugate_gradient(&mut apply, b, tolerance, max_iterations) {
        Ok((x, stats)) => Ok((x, stats, "cg")),
        // Indefinite operators either show non-positive curvature or stall.
        Err(Error::Numeric(_) | Error::Solver { .. }) => {
            minres(apply, b, tolerance, max_iterations).map(|(x, s)| (x, s, "minres"))
        }
        Err(e) => Err(e),
    }
}

/// Influence values `-⟨(H + λI)⁻¹ g_test, ∇L_i(θ*)⟩` for an explicit test gradient.
///
/// `H` is the Hessian of the mean training loss at `theta_star`.
pub fn if_value_with_test_grad(
    model: &Model,
    dataset: &Dataset,
    theta_star: &ParamVector,
    pool: &[usize],
    test_grad: &[f64],
    config: &IfConfig,
) -> Result<BaselineResult> {
    check_pool(dataset, pool)?;
    ensure_len(model.dim(), test_grad.len())?;
    if !(config.damping > 0.0) {
        return Err(Error::Parameter(format!(
            "damping must be positive, got {}",
            config.damping
        )));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let (result, resources) = measure(|| -> Result<(BTreeMap<usize, f64>, CgStats, &str)> {
        let (s, stats, solver) = solve_symmetric(
            |v| {
                let mut hv = model.hessian_vector_product(theta_star, dataset, &all, v)?;
                for (h, x) in hv.iter_mut().zip(v) {
                    *h += config.damping * x;
                }
                Ok(hv)
            },
            test_grad,
            config.tolerance,
            config.max_iterations,
        )?;
        let mut values = BTreeMap::new();
        for &i in pool {
            let g = model.per_sample_grad(theta_star, dataset.row(i), dataset.label(i))?;
            values.insert(i, -dot(&s, &g)?);
        }
        Ok((values, stats, solver))
    });
    let (values, stats, solver) = result?;
    Ok(BaselineResult {
        method: BaselineMethod::If,
        values,
        resources,
        details: serde_json::json!({
            "damping": config.damping,
            "cg_tolerance": config.tolerance,
            "cg_max_iterations": config.max_iterations,
            "solver": solver,
            "cg_iterations": stats.iterations,
            "cg_relative_residual": stats.residual,
        }),
    })
}

/// Influence values with the test gradient taken as the mean gradient of `test`.
pub fn if_value(
    model: &Model,
    dataset: &Dataset,
    theta_star: &ParamVector,
    pool: &[usize],
    test: &Dataset,
    config: &IfConfig,
) -> Result<BaselineResult> {
    let rows: Vec<usize> = (0..test.len()).collect();
    let test_grad = model.batch_grad(theta_star, test, &rows)?;
    let mut out = if_value_with_test_grad(model, dataset, theta_star, pool, &test_grad, config)?;
    out.details["test_batch"] = serde_json::json!(test.len());
    Ok(out)
}

/// Mean per-sample gradient norm over the given checkpoints.
pub fn gradnd_value(
    model: &Model,
    dataset: &Dataset,
    checkpoints: &[ParamVector],
    pool: &[usize],
) -> Result<BaselineResult> {
    check_pool(dataset, pool)?;
    if checkpoints.is_empty() {
        return Err(Error::Parameter("GradNd needs at least one checkpoint".into()));
    }
    let (values, resources) = measure(|| -> Result<BTreeMap<usize, f64>> {
        let mut values = BTreeMap::new();
        for &i in pool {
            let mut total = 0.0;
            for theta in checkpoints {
                let g = model.per_sample_grad(theta, dataset.row(i), dataset.label(i))?;
                total += norm2_unchecked(&g);
            }
            values.insert(i, total / checkpoints.len() as f64);
        }
        Ok(values)
    });
    Ok(BaselineResult {
        method: BaselineMethod::Gradnd,
        values: values?,
        resources,
        details: serde_json::json!({ "checkpoints": checkpoints.len() }),
    })
}

/// Hook keeping the pre-update parameters of selected steps.
#[derive(Debug, Clone, Default)]
pub struct CheckpointCollector {
    steps: Option<BTreeSet<usize>>,
    pub steps_taken: Vec<usize>,
    pub checkpoints: Vec<ParamVector>,
}

impl CheckpointCollector {
    /// Every step of the first epoch.
    pub fn first_epoch() -> Self {
        Self::default()
    }

    pub fn at_steps(steps: impl IntoIterator<Item = usize>) -> Self {
        Self {
            steps: Some(steps.into_iter().collect()),
            ..Self::default()
        }
    }
}

impl TrainHook for CheckpointCollector {
    fn on_step(&mut self, ctx: &StepContext<'_>, record: &StepRecord, _: &ParamVector) -> Result<()> {
        let wanted = match &self.steps {
            Some(s) => s.contains(&record.step),
            None => record.step <= ctx.steps_per_epoch,
        };
        if wanted {
            self.steps_taken.push(record.step);
            self.checkpoints.push(record.params_before.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth_gaussian_blobs;
    use crate::model::ModelSpec;
    use crate::numkit::RngState;
    use crate::trainer::{LrSchedule, Sampling};

    fn setup() -> (Model, Dataset, TrainConfig) {
        let ds = synth_gaussian_blobs(&RngState::new(3), 20, 2, 3, 2.0).unwrap();
        let model = Model::new(ModelSpec::logistic(3, 2)).unwrap();
        let cfg = TrainConfig {
            total_steps: 10,
            batch_size: 4,
            lr: LrSchedule::Constant { lr: 0.2 },
            rng: RngState::new(1),
            sampling: Sampling::EpochPermutation,
            init_seed: None,
        };
        (model, ds, cfg)
    }

    #[test]
    fn cg_solves_spd_system() {
        let a = [[4.0, 1.0], [1.0, 3.0]];
        let (x, stats) = conjugate_gradient(
            |v| Ok(vec![a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]),
            &[1.0, 2.0],
            1e-12,
            10,
        )
        .unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
        assert!(stats.iterations <= 2);
    }

    #[test]
    fn indefinite_system_falls_back_to_minres() {
        let diag = [3.0, -2.0, 0.5, -0.25, 1.5];
        let b = [1.0, 1.0, -2.0, 0.5, 4.0];
        let op = |v: &[f64]| Ok(v.iter().zip(&diag).map(|(x, d)| x * d).collect::<Vec<_>>());
        assert!(matches!(conjugate_gradient(op, &b, 1e-10, 50), Err(Error::Numeric(_))));
        let (x, _, solver) = solve_symmetric(op, &b, 1e-12, 50).unwrap();
        assert_eq!(solver, "minres");
        for k in 0..5 {
            assert!((x[k] - b[k] / diag[k]).abs() < 1e-9, "{k}: {}", x[k]);
        }
    }

    #[test]
    fn cg_reports_non_convergence() {
        let err = conjugate_gradient(
            |v| Ok(v.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).collect()),
            &[1.0; 10],
            1e-14,
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Solver { iterations: 2, .. }));
    }

    #[test]
    fn loo_unbatched_sample_has_zero_value() {
        let (model, ds, mut cfg) = setup();
        cfg.total_steps = 2;
        // Rows beyond the first 8 permutation slots are never seen in 2 steps.
        let mut sampler = crate::trainer::BatchSampler::new(
            cfg.rng.split(crate::numkit::streams::BATCH),
            ds.len(),
            4,
            Sampling::EpochPermutation,
        )
        .unwrap();
        let seen: BTreeSet<usize> = (1..=2).flat_map(|t| sampler.batch(t)).collect();
        let unseen = (0..ds.len()).find(|i| !seen.contains(i)).unwrap();
        let r = loo_value(&model, &ds, &cfg, &[unseen]).unwrap();
        assert_eq!(r.values[&unseen], 0.0);
    }

    #[test]
    fn loo_is_deterministic_and_covers_pool() {
        let (model, ds, cfg) = setup();
        let pool = [0, 5, 9];
        let a = loo_value(&model, &ds, &cfg, &pool).unwrap();
        let b = loo_value(&model, &ds, &cfg, &pool).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values.keys().copied().collect::<Vec<_>>(), pool.to_vec());
        assert!(loo_value(&model, &ds, &cfg, &[99]).is_err());
    }

    #[test]
    fn if_zero_and_scaled_test_gradient() {
        let (model, ds, cfg) = setup();
        let out = Trainer::new(&model, &ds, &cfg).run(&mut []).unwrap();
        let pool: Vec<usize> = (0..10).collect();
        let conf = IfConfig {
            tolerance: 1e-10,
            ..IfConfig::default()
        };
        let zero = vec![0.0; model.dim()];
        let z = if_value_with_test_grad(&model, &ds, &out.final_params, &pool, &zero, &conf).unwrap();
        assert!(z.values.values().all(|v| *v == 0.0));

        let g = model.batch_grad(&out.final_params, &ds, &[1, 2, 3]).unwrap();
        let g3: Vec<f64> = g.iter().map(|x| 3.0 * x).collect();
        let a = if_value_with_test_grad(&model, &ds, &out.final_params, &pool, &g, &conf).unwrap();
        let b = if_value_with_test_grad(&model, &ds, &out.final_params, &pool, &g3, &conf).unwrap();
        for i in &pool {
            assert!((b.values[i] - 3.0 * a.values[i]).abs() <= 1e-6 * a.values[i].abs().max(1e-3));
        }
        let bad = IfConfig { damping: 0.0, ..conf };
        assert!(if_value_with_test_grad(&model, &ds, &out.final_params, &pool, &g, &bad).is_err());
    }

    #[test]
    fn gradnd_cases() {
        let (model, ds, cfg) = setup();
        let mut collector = CheckpointCollector::first_epoch();
        Trainer::new(&model, &ds, &cfg).run(&mut [&mut collector]).unwrap();
        assert_eq!(collector.steps_taken, (1..=10).collect::<Vec<_>>());

        let theta = collector.checkpoints[0].clone();
        let single = gradnd_value(&model, &ds, std::slice::from_ref(&theta), &[4]).unwrap();
        let g = model.per_sample_grad(&theta, ds.row(4), ds.label(4)).unwrap();
        assert_eq!(single.values[&4], norm2_unchecked(&g));

        let fwd = gradnd_value(&model, &ds, &collector.checkpoints, &[1, 2, 3]).unwrap();
        let rev = gradnd_value(&model, &ds, &collector.checkpoints, &[3, 2, 1]).unwrap();
        assert_eq!(fwd.values, rev.values);
        assert!(fwd.values.values().all(|v| *v >= 0.0));
        assert!(gradnd_value(&model, &ds, &[], &[1]).is_err());
    }

    #[test]
    fn gradnd_zero_gradient_sample() {
        let ds = Dataset::new(vec![0.4, -2.0], 2, vec![1], 2).unwrap();
        let model = Model::new(ModelSpec::logistic(2, 2).with_loss(crate::model::LossKind::Mse)).unwrap();
        let theta = ParamVector::new(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let r = gradnd_value(&model, &ds, &[theta.clone(), theta], &[0]).unwrap();
        assert_eq!(r.values[&0], 0.0);
    }
}
