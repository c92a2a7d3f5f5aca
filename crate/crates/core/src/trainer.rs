//! Deterministic mini-batch SGD with synchronous step hooks and an optional
//! full-trajectory store.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, ParamVector};
use crate::numkit::{permutation, streams, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr * factor^floor((t - 1) / every)`
    StepDecay { lr: f64, factor: f64, every: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay { lr, factor, every } => {
                lr * factor.powi(((step.max(1) - 1) / every.max(1)) as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (lr, ok) = match *self {
            LrSchedule::Constant { lr } => (lr, true),
            LrSchedule::StepDecay { lr, factor, every } => {
                (lr, factor > 0.0 && factor <= 1.0 && every >= 1)
            }
        };
        if !(lr > 0.0 && lr.is_finite()) || !ok {
            return Err(Error::Parameter(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Each batch is `B` independent uniform draws.
    WithReplacement,
    /// Each epoch is a fresh permutation cut into consecutive batches; the
    /// last batch of an epoch may be short.
    EpochPermutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub rng: RngState,
    pub sampling: Sampling,
    /// Seed for the initial parameters. `None` derives it from `rng`.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Parameter("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Parameter(format!(
                "batch size {} outside [1, {n}]",
                self.batch_size
            )));
        }
        self.lr.validate()
    }

    pub fn init_rng(&self) -> RngState {
        match self.init_seed {
            Some(seed) => RngState::new(seed).split(streams::INIT),
            None => self.rng.split(streams::INIT),
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }
}

/// Everything recorded about one SGD step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Parameters before the update.
    pub params_before: ParamVector,
    pub lr: f64,
    pub batch: Vec<usize>,
    /// Mean loss of `batch` at the post-update parameters.
    pub batch_loss: f64,
}

/// Read-only context handed to hooks.
pub struct StepContext<'a> {
    pub model: &'a Model,
    pub dataset: &'a Dataset,
    pub total_steps: usize,
    pub steps_per_epoch: usize,
}

pub trait TrainHook {
    /// Called after step `record.step` with the post-update parameters.
    fn on_step(&mut self, ctx: &StepContext<'_>, record: &StepRecord, theta: &ParamVector)
        -> Result<()>;
}

impl<F> TrainHook for F
where
    F: FnMut(&StepContext<'_>, &StepRecord, &ParamVector) -> Result<()>,
{
    fn on_step(
        &mut self,
        ctx: &StepContext<'_>,
        record: &StepRecord,
        theta: &ParamVector,
    ) -> Result<()> {
        self(ctx, record, theta)
    }
}

/// Batch index generator. Batches depend only on `(rng, t)`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    mode: Sampling,
    rng: RngState,
    exclude: Option<usize>,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(rng: RngState, n: usize, batch_size: usize, mode: Sampling) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Parameter(format!(
                "batch size {batch_size} outside [1, {n}]"
            )));
        }
        Ok(Self {
            n,
            batch_size,
            mode,
            rng,
            exclude: None,
            cached_epoch: None,
        })
    }

    /// Skips row `row` everywhere. Permutations are filtered, so later batches
    /// are backfilled from the same permutation; with-replacement draws
    /// simply redraw. A full-batch permutation sampler shrinks to `n - 1`.
    pub fn excluding(mut self, row: usize) -> Result<Self> {
        if self.n < 2 || row >= self.n {
            return Err(Error::Parameter(format!(
                "cannot exclude row {row} from {} rows",
                self.n
            )));
        }
        if self.mode == Sampling::EpochPermutation {
            self.batch_size = self.batch_size.min(self.n - 1);
        }
        self.exclude = Some(row);
        self.cached_epoch = None;
        Ok(self)
    }

    fn active_rows(&self) -> usize {
        self.n - self.exclude.map_or(0, |_| 1)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.active_rows().div_ceil(self.batch_size)
    }

    pub fn batch(&mut self, t: usize) -> Vec<usize> {
        assert!(t >= 1, "steps are 1-based");
        match self.mode {
            Sampling::WithReplacement => {
                let mut gen = self.rng.split(t as u64).generator();
                let mut out = Vec::with_capacity(self.batch_size);
                while out.len() < self.batch_size {
                    let i = gen.random_range(0..self.n);
                    if Some(i) != self.exclude {
                        out.push(i);
                    }
                }
                out
            }
            Sampling::EpochPermutation => {
                let per_epoch = self.steps_per_epoch();
                let epoch = (t - 1) / per_epoch;
                let slot = (t - 1) % per_epoch;
                if self.cached_epoch.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm = permutation(&self.rng.split(epoch as u64), self.n);
                    if let Some(x) = self.exclude {
                        perm.retain(|&i| i != x);
                    }
                    self.cached_epoch = Some((epoch, perm));
                }
                let perm = &self.cached_epoch.as_ref().unwrap().1;
                let start = slot * self.batch_size;
                perm[start..(start + self.batch_size).min(perm.len())].to_vec()
            }
        }
    }
}

/// Batch `t` (1-based) of a fresh sampler.
pub fn sample_batch(rng: &RngState, n: usize, batch_size: usize, t: usize, mode: Sampling) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::Parameter("steps are 1-based".into()));
    }
    Ok(BatchSampler::new(*rng, n, batch_size, mode)?.batch(t))
}

/// One SGD update: `params - lr * mean_i grad_i`.
pub fn sgd_step(
    model: &Model,
    params: &ParamVector,
    dataset: &Dataset,
    batch: &[usize],
    lr: f64,
) -> Result<ParamVector> {
    let g = model.batch_grad(params, dataset, batch)?;
    Ok(ParamVector::new(
        params.iter().zip(&g).map(|(p, gi)| p - lr * gi).collect(),
    ))
}

/// Complete record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    pub records: BTreeMap<usize, StepRecord>,
    pub final_params: ParamVector,
}

impl TrajectoryStore {
    pub fn total_steps(&self) -> usize {
        self.records.len()
    }

    pub fn get(&self, step: usize) -> Result<&StepRecord> {
        self.records
            .get(&step)
            .ok_or_else(|| Error::Store(format!("missing record for step {step}")))
    }

    /// `steps/<t>.bin`, `steps/<t>.json`, `final.bin`, `model.json`.
    pub fn save(&self, dir: impl AsRef<Path>, spec: &ModelSpec) -> Result<()> {
        let dir = dir.as_ref();
        let steps = dir.join("steps");
        fs::create_dir_all(&steps).map_err(|e| Error::io(&steps, e))?;
        for (t, rec) in &self.records {
            let bin = steps.join(format!("{t}.bin"));
            fs::write(&bin, rec.params_before.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
            let meta = StepMeta {
                lr: rec.lr,
                batch: rec.batch.clone(),
                loss: rec.batch_loss,
            };
            let json = steps.join(format!("{t}.json"));
            let text = serde_json::to_string(&meta).map_err(|e| Error::Serde(e.to_string()))?;
            fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        }
        let fin = dir.join("final.bin");
        fs::write(&fin, self.final_params.to_le_bytes()).map_err(|e| Error::io(&fin, e))?;
        let spec_path = dir.join("model.json");
        let text = serde_json::to_string_pretty(spec).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, ModelSpec)> {
        let dir = dir.as_ref();
        let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
        let spec_path = dir.join("model.json");
        let spec: ModelSpec = serde_json::from_slice(&read(&spec_path)?)
            .map_err(|e| Error::Serde(e.to_string()))?;
        let final_params = ParamVector::from_le_bytes(&read(&dir.join("final.bin"))?)?;
        let mut records = BTreeMap::new();
        let steps = dir.join("steps");
        let mut t = 1;
        loop {
            let bin = steps.join(format!("{t}.bin"));
            if !bin.exists() {
                break;
            }
            let params_before = ParamVector::from_le_bytes(&read(&bin)?)?;
            let meta: StepMeta = serde_json::from_slice(&read(&steps.join(format!("{t}.json")))?)
                .map_err(|e| Error::Serde(e.to_string()))?;
            records.insert(
                t,
                StepRecord {
                    step: t,
                    params_before,
                    lr: meta.lr,
                    batch: meta.batch,
                    batch_loss: meta.loss,
                },
            );
            t += 1;
        }
        if records.is_empty() {
            return Err(Error::Store(format!("no step records under {}", steps.display())));
        }
        Ok((
            Self {
                records,
                final_params,
            },
            spec,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct StepMeta {
    lr: f64,
    batch: Vec<usize>,
    loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial_params: ParamVector,
    pub final_params: ParamVector,
    /// Present when the run was asked to keep every step.
    pub trajectory: Option<TrajectoryStore>,
}

/// Configurable training run.
pub struct Trainer<'a> {
    model: &'a Model,
    dataset: &'a Dataset,
    config: &'a TrainConfig,
    exclude: Option<usize>,
    init: Option<ParamVector>,
    keep_trajectory: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, dataset: &'a Dataset, config: &'a TrainConfig) -> Self {
        Self {
            model,
            dataset,
            config,
            exclude: None,
            init: None,
            keep_trajectory: false,
        }
    }

    pub fn excluding(mut self, row: usize) -> Self {
        self.exclude = Some(row);
        self
    }

    pub fn initial_params(mut self, init: ParamVector) -> Self {
        self.init = Some(init);
        self
    }

    pub fn keep_trajectory(mut self, keep: bool) -> Self {
        self.keep_trajectory = keep;
        self
    }

    pub fn run(self, hooks: &mut [&mut dyn TrainHook]) -> Result<TrainOutcome> {
        let (model, dataset, config) = (self.model, self.dataset, self.config);
        if dataset.is_empty() {
            return Err(Error::Parameter("cannot train on an empty dataset".into()));
        }
        config.validate(dataset.len())?;
        model.spec().check_dataset(dataset)?;

        let mut sampler = BatchSampler::new(
            config.rng.split(streams::BATCH),
            dataset.len(),
            config.batch_size,
            config.sampling,
        )?;
        if let Some(x) = self.exclude {
            sampler = sampler.excluding(x)?;
        }
        let initial = match self.init {
            Some(p) => {
                crate::error::ensure_len(model.dim(), p.len())?;
                p
            }
            None => model.init_params(&config.init_rng()),
        };
        let ctx = StepContext {
            model,
            dataset,
            total_steps: config.total_steps,
            steps_per_epoch: sampler.steps_per_epoch(),
        };
        let mut records = BTreeMap::new();
        let mut theta = initial.clone();
        for t in 1..=config.total_steps {
            let batch = sampler.batch(t);
            let lr = config.lr.at(t);
            let next = sgd_step(model, &theta, dataset, &batch, lr)?;
            let batch_loss = model.batch_loss(&next, dataset, &batch)?;
            let record = StepRecord {
                step: t,
                params_before: theta,
                lr,
                batch,
                batch_loss,
            };
            for hook in hooks.iter_mut() {
                hook.on_step(&ctx, &record, &next).map_err(|e| Error::Hook {
                    step: t,
                    source: Box::new(e),
                })?;
            }
            if self.keep_trajectory {
                records.insert(t, record);
            }
            theta = next;
        }
        Ok(TrainOutcome {
            initial_params: initial,
            trajectory: self.keep_trajectory.then(|| TrajectoryStore {
                records,
                final_params: theta.clone(),
            }),
            final_params: theta,
        })
    }
}

/// Trains with full trajectory storage.
pub fn run_training(
    model: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
    hooks: &mut [&mut dyn TrainHook],
) -> Result<TrajectoryStore> {
    let outcome = Trainer::new(model, dataset, config)
        .keep_trajectory(true)
        .run(hooks)?;
    Ok(outcome.trajectory.expect("trajectory requested"))
}
