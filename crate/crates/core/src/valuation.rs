//! Parameter-space data valuation.
//!
//! A sample `i` in batch `B_t` is scored by how much its own gradient step
//! would move `θ_{t-1}` toward a reference state `θ_ref`:
//!
//! ```text
//! Δθ  = θ_ref - θ_{t-1}
//! u_i = θ_ref - (θ_{t-1} - η_t ∇L_i(θ_{t-1}))
//! v_i = (‖Δθ‖ - ‖u_i‖) / (‖Δθ‖ + ‖u_i‖)
//! ```
//!
//! [`basic_valuate`] uses the final parameters of a stored trajectory as the
//! reference for every step. [`LiveVal`] runs inside training as a
//! [`TrainHook`] and references a near-future state `θ_{t-1+δ}` whose window
//! `δ` follows the loss-change rate; it only keeps the last `δ_max + 1`
//! parameter vectors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{ensure_len, Error, Result};
use crate::model::{Model, ModelSpec, ParamVector};
use crate::numkit::{norm2, norm2_unchecked, spearman, RngState};
use crate::trainer::{StepContext, StepRecord, TrainConfig, TrainHook, Trainer, TrajectoryStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// `‖Δθ‖ + ‖u‖`; values lie in [-1, 1].
    #[default]
    Symmetric,
    /// `‖Δθ‖` alone; unbounded below.
    DeltaOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossRateMode {
    /// `(L_t - L_{t-1}) / δ_{t-1}` from consecutive stored losses.
    #[default]
    Online,
    /// `(L_ref - L_{t'-1}) / δ_{t'-1}`, evaluated when the pair `(t', ref)`
    /// resolves and the reference loss is known.
    Deferred,
}

/// Step value with the symmetric denominator.
pub fn step_value(delta_norm: f64, u_norm: f64) -> Result<f64> {
    step_value_with(delta_norm, u_norm, Denominator::Symmetric)
}

/// Both norms zero gives 0, as does a zero `‖Δθ‖` under [`Denominator::DeltaOnly`].
pub fn step_value_with(delta_norm: f64, u_norm: f64, denominator: Denominator) -> Result<f64> {
    if !(delta_norm >= 0.0) || !(u_norm >= 0.0) {
        return Err(Error::Parameter(format!(
            "norms must be non-negative, got ({delta_norm}, {u_norm})"
        )));
    }
    let denom = match denominator {
        Denominator::Symmetric => delta_norm + u_norm,
        Denominator::DeltaOnly => delta_norm,
    };
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((delta_norm - u_norm) / denom)
}

/// `θ_ref - (θ_prev - lr * grad)`.
pub fn hypothetical_state(
    theta_ref: &[f64],
    theta_prev: &[f64],
    lr: f64,
    grad: &[f64],
) -> Result<Vec<f64>> {
    ensure_len(theta_ref.len(), theta_prev.len())?;
    ensure_len(theta_ref.len(), grad.len())?;
    Ok(theta_ref
        .iter()
        .zip(theta_prev)
        .zip(grad)
        .map(|((r, p), g)| r - (p - lr * g))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepValue {
    pub sample: usize,
    pub step: usize,
    /// Step whose parameters served as the reference.
    pub reference_step: usize,
    pub value: f64,
    pub delta_norm: f64,
    pub u_norm: f64,
    pub grad_norm: f64,
}

/// Append-only step values plus per-sample running totals.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuationLedger {
    step_values: Vec<StepValue>,
    cumulative: Vec<f64>,
}

impl ValuationLedger {
    pub fn new(n_samples: usize) -> Self {
        Self {
            step_values: Vec::new(),
            cumulative: vec![0.0; n_samples],
        }
    }

    pub fn record(&mut self, value: StepValue) {
        self.cumulative[value.sample] += value.value;
        self.step_values.push(value);
    }

    pub fn step_values(&self) -> &[StepValue] {
        &self.step_values
    }

    /// Cumulative value per row; rows never batched hold 0.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn len(&self) -> usize {
        self.step_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step_values.is_empty()
    }

    /// Step values sorted by `(step, sample)`.
    pub fn sorted_step_values(&self) -> Vec<StepValue> {
        let mut v = self.step_values.clone();
        v.sort_by_key(|s| (s.step, s.sample));
        v
    }

    /// Cumulative totals restricted to step values with `step <= last_step`.
    pub fn cumulative_through(&self, last_step: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cumulative.len()];
        for sv in self.step_values.iter().filter(|s| s.step <= last_step) {
            out[sv.sample] += sv.value;
        }
        out
    }

    /// `sample_id,step,value`, sorted by step then sample.
    pub fn step_values_csv(&self, ids: &[u64]) -> String {
        let mut out = String::from("sample_id,step,value\n");
        for sv in self.sorted_step_values() {
            let _ = writeln!(out, "{},{},{:?}", ids[sv.sample], sv.step, sv.value);
        }
        out
    }

    /// `sample_id,cumulative`, in row order.
    pub fn cumulative_csv(&self, ids: &[u64]) -> String {
        let mut out = String::from("sample_id,cumulative\n");
        for (row, v) in self.cumulative.iter().enumerate() {
            let _ = writeln!(out, "{},{v:?}", ids[row]);
        }
        out
    }
}

/// Scores every sample of `batch` against `theta_ref` and appends to `ledger`.
#[allow(clippy::too_many_arguments)]
fn value_batch(
    model: &Model,
    dataset: &Dataset,
    theta_prev: &[f64],
    theta_ref: &[f64],
    lr: f64,
    batch: &[usize],
    step: usize,
    reference_step: usize,
    denominator: Denominator,
    ledger: &mut ValuationLedger,
) -> Result<()> {
    ensure_len(theta_ref.len(), theta_prev.len())?;
    let delta: Vec<f64> = theta_ref.iter().zip(theta_prev).map(|(r, p)| r - p).collect();
    let delta_norm = norm2(&delta)?;
    for &i in batch {
        let grad = model.per_sample_grad(theta_prev, dataset.row(i), dataset.label(i))?;
        let u: Vec<f64> = delta.iter().zip(&grad).map(|(d, g)| d + lr * g).collect();
        let u_norm = norm2(&u)?;
        ledger.record(StepValue {
            sample: i,
            step,
            reference_step,
            value: step_value_with(delta_norm, u_norm, denominator)?,
            delta_norm,
            u_norm,
            grad_norm: norm2_unchecked(&grad),
        });
    }
    Ok(())
}

/// Values every stored step against the trajectory's final parameters.
pub fn basic_valuate(
    store: &TrajectoryStore,
    model: &Model,
    dataset: &Dataset,
    denominator: Denominator,
) -> Result<ValuationLedger> {
    let total = store.total_steps();
    if total == 0 {
        return Err(Error::Store("empty trajectory".into()));
    }
    let reference = &store.final_params;
    let mut ledger = ValuationLedger::new(dataset.len());
    for t in 1..=total {
        let rec = store.get(t)?;
        value_batch(
            model,
            dataset,
            &rec.params_before,
            reference,
            rec.lr,
            &rec.batch,
            t,
            total,
            denominator,
            &mut ledger,
        )?;
    }
    Ok(ledger)
}

/// Look-ahead window bounds and adaptation thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowParams {
    pub delta0: usize,
    pub delta_min: usize,
    pub delta_max: usize,
    pub delta_step: usize,
    pub eps_min: f64,
    pub eps_max: f64,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            delta0: 10,
            delta_min: 1,
            delta_max: 50,
            delta_step: 1,
            eps_min: 0.005,
            eps_max: 0.05,
        }
    }
}

impl WindowParams {
    /// Window pinned at `delta`.
    pub fn fixed(delta: usize) -> Self {
        Self {
            delta0: delta,
            delta_min: delta,
            delta_max: delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_min < 1 || self.delta_min > self.delta0 || self.delta0 > self.delta_max {
            return Err(Error::Parameter(format!(
                "need 1 <= delta_min <= delta0 <= delta_max, got {} / {} / {}",
                self.delta_min, self.delta0, self.delta_max
            )));
        }
        if !(self.eps_min >= 0.0) || !(self.eps_min <= self.eps_max) {
            return Err(Error::Parameter(format!(
                "need 0 <= eps_min <= eps_max, got {} / {}",
                self.eps_min, self.eps_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowState {
    pub delta: usize,
    pub params: WindowParams,
    /// Most recent loss-change rate, if one has been computed.
    pub loss_rate: Option<f64>,
}

impl WindowState {
    pub fn new(params: WindowParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            delta: params.delta0,
            params,
            loss_rate: None,
        })
    }
}

/// Grows the window on fast loss change, shrinks it on slow change.
pub fn window_update(state: WindowState, loss_rate: f64) -> WindowState {
    let p = state.params;
    let rate = loss_rate.abs();
    let delta = if rate > p.eps_max {
        (state.delta + p.delta_step).min(p.delta_max)
    } else if rate < p.eps_min {
        state.delta.saturating_sub(p.delta_step).max(p.delta_min)
    } else {
        state.delta
    };
    WindowState {
        delta,
        params: p,
        loss_rate: Some(loss_rate),
    }
}

/// `min(t - 1 + delta_prev, total)`.
pub fn reference_step(t: usize, delta_prev: usize, total: usize) -> usize {
    (t.saturating_sub(1) + delta_prev).min(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ValuationConfig {
    pub window: WindowParams,
    pub denominator: Denominator,
    pub loss_rate: LossRateMode,
}

#[derive(Debug, Clone)]
struct QueuedState {
    step: usize,
    theta: ParamVector,
    batch: Vec<usize>,
    lr: f64,
    /// `None` for the initial state.
    loss: Option<f64>,
}

/// Model queue (recent parameters) and reference queue (pending pairs).
#[derive(Debug, Clone, Default)]
pub struct DualQueue {
    models: VecDeque<QueuedState>,
    /// Keyed `(t_ref, t_eval)` so pending pairs come out by reference step,
    /// then ascending evaluation step.
    refs: BTreeSet<(usize, usize)>,
}

impl DualQueue {
    pub fn model_len(&self) -> usize {
        self.models.len()
    }

    pub fn ref_len(&self) -> usize {
        self.refs.len()
    }

    /// Steps currently held in the model queue.
    pub fn model_steps(&self) -> Vec<usize> {
        self.models.iter().map(|m| m.step).collect()
    }

    /// Pending `(t_eval, t_ref)` pairs, ascending by `t_eval`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self.refs.iter().map(|&(r, e)| (e, r)).collect();
        v.sort_unstable();
        v
    }

    fn find(&self, step: usize) -> Option<&QueuedState> {
        let front = self.models.front()?.step;
        self.models
            .get(step.checked_sub(front)?)
            .filter(|m| m.step == step)
    }

    fn latest(&self) -> Option<&QueuedState> {
        self.models.back()
    }
}

/// Adaptive-reference valuation engine, driven one training step at a time.
#[derive(Debug, Clone)]
pub struct LiveVal {
    config: ValuationConfig,
    total_steps: usize,
    queue: DualQueue,
    window: WindowState,
    /// `deltas[t]` is the window in force after step `t`; `deltas[0] = δ0`.
    deltas: Vec<usize>,
    ledger: ValuationLedger,
    last_step: usize,
}

impl LiveVal {
    pub fn new(config: ValuationConfig, n_samples: usize, total_steps: usize) -> Result<Self> {
        let window = WindowState::new(config.window)?;
        if total_steps == 0 {
            return Err(Error::Parameter("total_steps must be >= 1".into()));
        }
        Ok(Self {
            config,
            total_steps,
            queue: DualQueue::default(),
            window,
            deltas: vec![config.window.delta0],
            ledger: ValuationLedger::new(n_samples),
            last_step: 0,
        })
    }

    pub fn config(&self) -> &ValuationConfig {
        &self.config
    }

    pub fn ledger(&self) -> &ValuationLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> ValuationLedger {
        self.ledger
    }

    pub fn queue(&self) -> &DualQueue {
        &self.queue
    }

    pub fn window(&self) -> &WindowState {
        &self.window
    }

    pub fn deltas(&self) -> &[usize] {
        &self.deltas
    }

    pub fn last_step(&self) -> usize {
        self.last_step
    }

    fn update_window(&mut self, numerator: f64, delta_prev: usize) {
        let rate = numerator / delta_prev as f64;
        self.window = window_update(self.window, rate);
    }

    /// Processes training step `record.step` given the post-update `theta`.
    pub fn observe(
        &mut self,
        model: &Model,
        dataset: &Dataset,
        record: &StepRecord,
        theta: &ParamVector,
    ) -> Result<()> {
        let t = record.step;
        if t != self.last_step + 1 || t > self.total_steps {
            return Err(Error::Internal(format!(
                "step {t} observed after step {} (of {})",
                self.last_step, self.total_steps
            )));
        }
        let delta_max = self.config.window.delta_max;
        if t == 1 {
            self.queue.models.push_back(QueuedState {
                step: 0,
                theta: record.params_before.clone(),
                batch: Vec::new(),
                lr: 0.0,
                loss: None,
            });
        }
        let prev_loss = self.queue.latest().and_then(|m| m.loss);
        self.queue.models.push_back(QueuedState {
            step: t,
            theta: theta.clone(),
            batch: record.batch.clone(),
            lr: record.lr,
            loss: Some(record.batch_loss),
        });

        let delta_prev = self.deltas[t - 1];
        self.queue
            .refs
            .insert((reference_step(t, delta_prev, self.total_steps), t));

        if self.config.loss_rate == LossRateMode::Online {
            // No L_0 exists, so the first step leaves the window at δ0.
            if let Some(prev) = prev_loss {
                self.update_window(record.batch_loss - prev, delta_prev);
            }
        }

        let due: Vec<usize> = self
            .queue
            .refs
            .range((t, 0)..=(t, usize::MAX))
            .map(|&(_, e)| e)
            .collect();
        for t_eval in due {
            let before = self.queue.find(t_eval - 1).ok_or_else(|| {
                Error::Internal(format!("θ_{} evicted before pair ({t_eval}, {t})", t_eval - 1))
            })?;
            let eval = self.queue.find(t_eval).ok_or_else(|| {
                Error::Internal(format!("step {t_eval} evicted before pair ({t_eval}, {t})"))
            })?;
            value_batch(
                model,
                dataset,
                &before.theta,
                theta,
                eval.lr,
                &eval.batch,
                t_eval,
                t,
                self.config.denominator,
                &mut self.ledger,
            )?;
            if self.config.loss_rate == LossRateMode::Deferred {
                if let Some(start) = before.loss {
                    let d = self.deltas[t_eval - 1];
                    self.update_window(record.batch_loss - start, d);
                }
            }
            self.queue.refs.remove(&(t, t_eval));
        }

        self.deltas.push(self.window.delta);
        while self
            .queue
            .models
            .front()
            .is_some_and(|m| m.step + delta_max < t)
        {
            self.queue.models.pop_front();
        }
        self.queue.refs.retain(|&(r, _)| r >= t);
        self.last_step = t;
        Ok(())
    }

    /// Ledger plus every pending pair valued against the latest parameters.
    /// Used for mid-training snapshots; the queues are left untouched.
    pub fn provisional_ledger(&self, model: &Model, dataset: &Dataset) -> Result<ValuationLedger> {
        let mut ledger = self.ledger.clone();
        let Some(latest) = self.queue.latest() else {
            return Ok(ledger);
        };
        for (t_eval, _) in self.queue.pairs() {
            let before = self
                .queue
                .find(t_eval - 1)
                .ok_or_else(|| Error::Internal(format!("θ_{} missing", t_eval - 1)))?;
            let eval = self
                .queue
                .find(t_eval)
                .ok_or_else(|| Error::Internal(format!("step {t_eval} missing")))?;
            value_batch(
                model,
                dataset,
                &before.theta,
                &latest.theta,
                eval.lr,
                &eval.batch,
                t_eval,
                latest.step,
                self.config.denominator,
                &mut ledger,
            )?;
        }
        Ok(ledger)
    }
}

impl TrainHook for LiveVal {
    fn on_step(
        &mut self,
        ctx: &StepContext<'_>,
        record: &StepRecord,
        theta: &ParamVector,
    ) -> Result<()> {
        self.observe(ctx.model, ctx.dataset, record, theta)
    }
}

/// Trains once with a [`LiveVal`] hook attached and returns its ledger.
pub fn liveval_train(
    model: &Model,
    dataset: &Dataset,
    train: &TrainConfig,
    valuation: ValuationConfig,
) -> Result<(ValuationLedger, ParamVector)> {
    let mut engine = LiveVal::new(valuation, dataset.len(), train.total_steps)?;
    let outcome = Trainer::new(model, dataset, train).run(&mut [&mut engine])?;
    Ok((engine.into_ledger(), outcome.final_params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityEntry {
    pub sample: usize,
    pub step: usize,
    pub observations: usize,
    /// Population standard deviation across runs.
    pub std: f64,
    /// `2 η_t Ĝ / D_t`.
    pub bound: f64,
    /// `η_t Ĝ / D_t`.
    pub tight_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityReport {
    pub runs: usize,
    /// Largest per-sample gradient norm seen in any run.
    pub max_grad_norm: f64,
    pub entries: Vec<VolatilityEntry>,
    /// `(sample, step)` pairs seen in fewer than two runs.
    pub skipped: usize,
    pub violations: usize,
    pub tight_violations: usize,
    /// `(step, max std over samples)` for steps with at least one entry.
    pub per_step_max: Vec<(usize, f64)>,
    /// Rank correlation between step and per-step max std.
    pub spearman_step_vs_max: Option<f64>,
}

/// Re-trains once per seed and measures the spread of each step value.
///
/// Each seed replaces `train.rng`; `hold_init` keeps the initial parameters
/// drawn from `train.init_seed` (or the first seed) across runs.
pub fn volatility_probe(
    spec: &ModelSpec,
    dataset: &Dataset,
    train: &TrainConfig,
    valuation: ValuationConfig,
    seeds: &[u64],
    hold_init: bool,
) -> Result<VolatilityReport> {
    if seeds.len() < 8 {
        return Err(Error::Parameter(format!(
            "volatility probe needs >= 8 seeds, got {}",
            seeds.len()
        )));
    }
    let model = Model::new(spec.clone())?;
    let held_init = train.init_seed.unwrap_or(seeds[0]);
    let mut observed: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut min_delta: BTreeMap<usize, f64> = BTreeMap::new();
    let mut max_grad = 0.0f64;
    for &seed in seeds {
        let mut cfg = train.clone();
        cfg.rng = RngState::new(seed);
        cfg.init_seed = Some(if hold_init { held_init } else { seed });
        let (ledger, _) = liveval_train(&model, dataset, &cfg, valuation)?;
        let mut seen_this_run = BTreeSet::new();
        for sv in ledger.step_values() {
            max_grad = max_grad.max(sv.grad_norm);
            let d = min_delta.entry(sv.step).or_insert(f64::INFINITY);
            *d = d.min(sv.delta_norm);
            if seen_this_run.insert((sv.sample, sv.step)) {
                observed.entry((sv.sample, sv.step)).or_default().push(sv.value);
            }
        }
    }

    let mut entries = Vec::new();
    let mut skipped = 0;
    let (mut violations, mut tight_violations) = (0, 0);
    let mut per_step: BTreeMap<usize, f64> = BTreeMap::new();
    for ((sample, step), values) in observed {
        if values.len() < 2 {
            skipped += 1;
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let d = min_delta[&step];
        let tight = if d > 0.0 {
            train.lr.at(step) * max_grad / d
        } else {
            f64::INFINITY
        };
        let bound = 2.0 * tight;
        violations += (std > bound) as usize;
        tight_violations += (std > tight) as usize;
        let m = per_step.entry(step).or_insert(0.0);
        *m = m.max(std);
        entries.push(VolatilityEntry {
            sample,
            step,
            observations: values.len(),
            std,
            bound,
            tight_bound: tight,
        });
    }
    let per_step_max: Vec<(usize, f64)> = per_step.into_iter().collect();
    let xs: Vec<f64> = per_step_max.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = per_step_max.iter().map(|p| p.1).collect();
    Ok(VolatilityReport {
        runs: seeds.len(),
        max_grad_norm: max_grad,
        entries,
        skipped,
        violations,
        tight_violations,
        spearman_step_vs_max: spearman(&xs, &ys),
        per_step_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_value_examples() {
        assert_eq!(step_value(5.0, 3.0).unwrap(), 0.25);
        assert_eq!(step_value(2.5, 2.5).unwrap(), 0.0);
        assert_eq!(step_value(4.0, 0.0).unwrap(), 1.0);
        assert_eq!(step_value(0.0, 4.0).unwrap(), -1.0);
        assert_eq!(step_value(0.0, 0.0).unwrap(), 0.0);
        assert!(step_value(-1.0, 2.0).is_err());
        assert!(step_value(1.0, f64::NAN).is_err());
        assert_eq!(step_value_with(4.0, 1.0, Denominator::DeltaOnly).unwrap(), 0.75);
        assert_eq!(step_value_with(0.0, 1.0, Denominator::DeltaOnly).unwrap(), 0.0);
    }

    #[test]
    fn hypothetical_state_examples() {
        let u = hypothetical_state(&[1.0, 2.0], &[0.5, -1.0], 0.1, &[0.0, 0.0]).unwrap();
        assert_eq!(u, vec![0.5, 3.0]);
        // θ_ref - θ_prev = (4, 3); lr * grad = (-4, 0) gives u = (0, 3).
        let u = hypothetical_state(&[4.0, 3.0], &[0.0, 0.0], 1.0, &[-4.0, 0.0]).unwrap();
        assert_eq!(u, vec![0.0, 3.0]);
        let v = step_value(5.0, norm2(&u).unwrap()).unwrap();
        assert_eq!(v, 0.25);
        assert!(hypothetical_state(&[1.0], &[1.0, 2.0], 1.0, &[0.0]).is_err());
    }

    #[test]
    fn window_update_cases() {
        let params = WindowParams {
            delta0: 5,
            delta_min: 2,
            delta_max: 10,
            delta_step: 1,
            eps_min: 0.01,
            eps_max: 0.1,
        };
        let s = WindowState::new(params).unwrap();
        assert_eq!(window_update(s, 0.5).delta, 6);
        assert_eq!(window_update(s, -0.5).delta, 6);
        assert_eq!(window_update(s, 0.05).delta, 5);
        assert_eq!(window_update(s, 0.001).delta, 4);
        let top = WindowState { delta: 10, ..s };
        assert_eq!(window_update(top, 1.0).delta, 10);
        let bottom = WindowState { delta: 2, ..s };
        assert_eq!(window_update(bottom, 0.0).delta, 2);
        assert!(WindowState::new(WindowParams { delta_min: 0, ..params }).is_err());
        assert!(WindowState::new(WindowParams { delta0: 11, ..params }).is_err());
    }

    #[test]
    fn reference_step_cases() {
        assert_eq!(reference_step(1, 5, 100), 5);
        assert_eq!(reference_step(98, 5, 100), 100);
        assert_eq!(reference_step(100, 1, 100), 100);
        assert_eq!(reference_step(100, 50, 100), 100);
    }

    #[test]
    fn ledger_csv_and_snapshots() {
        let mut l = ValuationLedger::new(3);
        for (sample, step, value) in [(2, 1, 0.5), (0, 1, -0.25), (2, 2, 0.125)] {
            l.record(StepValue {
                sample,
                step,
                reference_step: step,
                value,
                delta_norm: 1.0,
                u_norm: 1.0,
                grad_norm: 1.0,
            });
        }
        assert_eq!(l.cumulative(), &[-0.25, 0.0, 0.625]);
        assert_eq!(l.cumulative_through(1), vec![-0.25, 0.0, 0.5]);
        let ids = [10, 11, 12];
        assert_eq!(
            l.step_values_csv(&ids),
            "sample_id,step,value\n10,1,-0.25\n12,1,0.5\n12,2,0.125\n"
        );
        assert_eq!(
            l.cumulative_csv(&ids),
            "sample_id,cumulative\n10,-0.25\n11,0.0\n12,0.625\n"
        );
    }

    proptest! {
        #[test]
        fn bounded(a in 0.0f64..1e6, b in 0.0f64..1e6) {
            let v = step_value(a, b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn antisymmetric(a in 0.0f64..1e6, b in 0.0f64..1e6) {
            prop_assert_eq!(step_value(a, b).unwrap(), -step_value(b, a).unwrap());
        }

        #[test]
        fn u_minus_delta_bounded_by_step(
            (r, p, g) in (1usize..16).prop_flat_map(|n| (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )),
            lr in 0.0f64..2.0,
        ) {
            let u = hypothetical_state(&r, &p, lr, &g).unwrap();
            let delta: Vec<f64> = r.iter().zip(&p).map(|(a, b)| a - b).collect();
            let gap = (norm2(&u).unwrap() - norm2(&delta).unwrap()).abs();
            prop_assert!(gap <= lr * norm2(&g).unwrap() + 1e-9);
        }
    }
}
