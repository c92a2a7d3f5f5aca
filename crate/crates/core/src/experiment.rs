//! Corruption-detection experiments: configuration, the per-seed pipeline,
//! detection scoring, early-detection curves and result export.
//!
//! Protocol per seed: build the dataset, corrupt `k` rows, draw a 100-row
//! evaluation pool holding every corrupted row plus uniformly drawn clean
//! rows, value all training rows with each method, then count corrupted rows
//! among the `k` lowest-valued pool members.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    gradnd_value, if_value, loo_value, BaselineMethod, BaselineResult, CheckpointCollector,
    IfConfig,
};
use crate::dataio::{
    corrupt, hex, load_csv, load_idx, synth_gaussian_blobs, synth_sparse_blobs,
    CorruptionKind, CorruptionManifest, CorruptionSpec, CsvSchema, Dataset,
};
use crate::error::{Error, Result};
use crate::model::{LossKind, Model, ModelSpec, ParamVector};
use crate::numkit::{choose_without_replacement, mean_std, streams, RngState};
use crate::resources::{measure, ResourceStats};
use crate::trainer::{
    LrSchedule, Sampling, StepContext, StepRecord, TrainConfig, TrainHook, Trainer,
};
use crate::valuation::{volatility_probe, LiveVal, ValuationConfig, VolatilityReport};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LIVEVAL: &str = "liveval";

// ---------------------------------------------------------------------------
// Detection scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    pub seed: u64,
    pub k: usize,
    pub pool_size: usize,
    pub detected: usize,
    pub detection_rate: f64,
    /// Set when `k == 0`; the rate is then reported as 0.
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_epoch_detected: Option<Vec<usize>>,
    /// Epoch counts came from snapshots with pending pairs resolved early.
    #[serde(default)]
    pub provisional: bool,
}

/// Counts corrupted rows among the `k` lowest-valued pool members.
///
/// Ties are broken by ascending row, so the result does not depend on the
/// order of `pool`.
pub fn detection_metric(
    method: &str,
    values: &BTreeMap<usize, f64>,
    mask: &[bool],
    k: usize,
    pool: &[usize],
) -> Result<DetectionReport> {
    if pool.len() < k {
        return Err(Error::Parameter(format!(
            "pool of {} cannot hold {k} corrupted rows",
            pool.len()
        )));
    }
    if let Some(&bad) = pool.iter().find(|&&i| i >= mask.len()) {
        return Err(Error::Parameter(format!("pool row {bad} outside mask")));
    }
    let masked = pool.iter().filter(|&&i| mask[i]).count();
    if masked != k {
        return Err(Error::Parameter(format!(
            "pool holds {masked} corrupted rows, expected {k}"
        )));
    }
    let mut ranked: Vec<(f64, usize)> = pool
        .iter()
        .map(|&i| {
            values
                .get(&i)
                .map(|v| (*v, i))
                .ok_or_else(|| Error::Parameter(format!("no value for pool row {i}")))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let detected = ranked[..k].iter().filter(|(_, i)| mask[*i]).count();
    Ok(DetectionReport {
        method: method.to_string(),
        seed: 0,
        k,
        pool_size: pool.len(),
        detected,
        detection_rate: if k == 0 { 0.0 } else { detected as f64 / k as f64 },
        degenerate: k == 0,
        per_epoch_detected: None,
        provisional: false,
    })
}

/// Restricts per-row values to the pool.
pub fn pool_values(values: &[f64], pool: &[usize]) -> BTreeMap<usize, f64> {
    pool.iter().map(|&i| (i, values[i])).collect()
}

/// Detection count for each snapshot of cumulative values.
pub fn early_detection_curve(
    snapshots: &[Vec<f64>],
    mask: &[bool],
    k: usize,
    pool: &[usize],
) -> Result<Vec<usize>> {
    snapshots
        .iter()
        .map(|snap| detection_metric(LIVEVAL, &pool_values(snap, pool), mask, k, pool).map(|r| r.detected))
        .collect()
}

/// Every corrupted row plus `pool_size - k` clean rows drawn uniformly.
pub fn build_pool(mask: &[bool], pool_size: usize, rng: &RngState) -> Result<Vec<usize>> {
    let corrupted: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let clean: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    if corrupted.len() > pool_size || clean.len() < pool_size - corrupted.len() {
        return Err(Error::Parameter(format!(
            "cannot build a pool of {pool_size} from {} corrupted and {} clean rows",
            corrupted.len(),
            clean.len()
        )));
    }
    let mut pool = corrupted.clone();
    pool.extend(choose_without_replacement(rng, &clean, pool_size - corrupted.len()));
    pool.sort_unstable();
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Blobs {
        n_per_class: usize,
        n_classes: usize,
        dim: usize,
        separation: f64,
    },
    SparseBlobs {
        n_per_class: usize,
        n_classes: usize,
        dim: usize,
        active: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` rows.
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Clean rows held out of training; their mean gradient is the IF test gradient.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
}

fn default_holdout() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    #[serde(flatten)]
    pub kind: CorruptionKind,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            loss: LossKind::CrossEntropy,
            bias: true,
        }
    }
}

impl ModelConfig {
    pub fn spec_for(&self, dataset: &Dataset) -> ModelSpec {
        let mut widths = vec![dataset.n_features()];
        widths.extend(&self.hidden);
        widths.push(dataset.n_classes());
        ModelSpec {
            widths,
            activation: crate::model::Activation::Relu,
            loss: self.loss,
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Total steps; when absent, `epochs` full passes are run.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub sampling: Sampling,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: None,
            epochs: 5,
            batch_size: 32,
            lr: LrSchedule::Constant { lr: 0.1 },
            sampling: Sampling::EpochPermutation,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, n: usize, rng: RngState, init_seed: Option<u64>) -> TrainConfig {
        let steps = self
            .steps
            .unwrap_or(self.epochs * n.div_ceil(self.batch_size.max(1)));
        TrainConfig {
            total_steps: steps,
            batch_size: self.batch_size,
            lr: self.lr,
            rng,
            sampling: self.sampling,
            init_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselinesConfig {
    pub methods: Vec<BaselineMethod>,
    #[serde(rename = "if")]
    pub influence: IfConfig,
    /// Retrain only for the first `loo_pool` pool rows; LOO detection is
    /// reported only when this covers the whole pool.
    pub loo_pool: Option<usize>,
    /// Steps whose pre-update parameters feed GradNd; empty means the first epoch.
    pub gradnd_steps: Vec<usize>,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self {
            methods: vec![BaselineMethod::Gradnd],
            influence: IfConfig::default(),
            loo_pool: None,
            gradnd_steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub seeds: Vec<u64>,
    /// Keep the initial parameters fixed across probe runs.
    pub hold_init: bool,
    /// Overrides the experiment's learning-rate schedule for the probe.
    pub lr: Option<LrSchedule>,
    /// Overrides the experiment's step count for the probe.
    pub steps: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seeds: (1..=16).collect(),
            hold_init: true,
            lr: None,
            steps: None,
        }
    }
}

/// Full experiment description, loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub pool_size: usize,
    pub early_detection: bool,
    pub data: DataConfig,
    pub corruption: CorruptionConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub valuation: ValuationConfig,
    pub baselines: BaselinesConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            pool_size: 100,
            early_detection: true,
            data: DataConfig {
                source: DataSource::Blobs {
                    n_per_class: 250,
                    n_classes: 2,
                    dim: 10,
                    separation: 3.0,
                },
                holdout: default_holdout(),
            },
            corruption: CorruptionConfig {
                kind: CorruptionKind::LabelFlip {
                    source: 0,
                    target: 1,
                },
                count: 40,
            },
            model: ModelConfig::default(),
            train: TrainSection::default(),
            valuation: ValuationConfig::default(),
            baselines: BaselinesConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
            // A run manifest carries its config under `config`.
            let value = match value.get("config") {
                Some(inner) => inner.clone(),
                None => value,
            };
            serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Parameter("at least one seed is required".into()));
        }
        if self.pool_size < self.corruption.count {
            return Err(Error::Parameter(format!(
                "pool_size {} smaller than corruption count {}",
                self.pool_size, self.corruption.count
            )));
        }
        self.valuation.window.validate()
    }
}

// ---------------------------------------------------------------------------
// Per-seed pipeline
// ---------------------------------------------------------------------------

/// Data, model and configuration for one seed, ready for valuation.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub train: Dataset,
    pub holdout: Dataset,
    pub corruption: CorruptionManifest,
    pub pool: Vec<usize>,
    pub model: Model,
    pub train_config: TrainConfig,
}

fn load_source(source: &DataSource, rng: &RngState) -> Result<Dataset> {
    match source {
        DataSource::Blobs {
            n_per_class,
            n_classes,
            dim,
            separation,
        } => synth_gaussian_blobs(rng, *n_per_class, *n_classes, *dim, *separation),
        DataSource::SparseBlobs {
            n_per_class,
            n_classes,
            dim,
            active,
            separation,
        } => synth_sparse_blobs(rng, *n_per_class, *n_classes, *dim, *active, *separation),
        DataSource::Csv { path, schema } => load_csv(path, schema),
        DataSource::Idx {
            images,
            labels,
            limit,
        } => {
            let ds = load_idx(images, labels)?;
            Ok(match limit {
                Some(l) if *l < ds.len() => ds.select(&(0..*l).collect::<Vec<_>>()),
                _ => ds,
            })
        }
    }
}

/// Training set and clean held-out set for `seed`.
///
/// Synthetic sources draw the held-out rows from an independent stream so
/// the training set keeps its configured size; file sources split rows off.
pub fn build_data(config: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let root = RngState::new(seed);
    let data_rng = root.split(streams::DATA);
    let train = load_source(&config.source, &data_rng)?;
    if config.holdout == 0 {
        let empty = train.select(&[]);
        return Ok((train, empty));
    }
    match &config.source {
        DataSource::Blobs { n_classes, dim, separation, .. } => {
            let per = config.holdout.div_ceil(*n_classes);
            let extra = synth_gaussian_blobs(&root.split(streams::HOLDOUT), per, *n_classes, *dim, *separation)?;
            Ok((train, extra.select(&(0..config.holdout).collect::<Vec<_>>())))
        }
        DataSource::SparseBlobs { n_classes, dim, active, separation, .. } => {
            let per = config.holdout.div_ceil(*n_classes);
            let extra = synth_sparse_blobs(
                &root.split(streams::HOLDOUT),
                per,
                *n_classes,
                *dim,
                *active,
                *separation,
            )?;
            Ok((train, extra.select(&(0..config.holdout).collect::<Vec<_>>())))
        }
        _ => {
            if config.holdout >= train.len() {
                return Err(Error::Parameter(format!(
                    "holdout {} leaves no training rows out of {}",
                    config.holdout,
                    train.len()
                )));
            }
            let order = crate::numkit::permutation(&root.split(streams::HOLDOUT), train.len());
            let (held, kept) = order.split_at(config.holdout);
            let mut kept = kept.to_vec();
            kept.sort_unstable();
            let mut held = held.to_vec();
            held.sort_unstable();
            Ok((train.select(&kept), train.select(&held)))
        }
    }
}

pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let root = RngState::new(seed);
    let (clean, holdout) = build_data(&config.data, seed)?;
    let spec = CorruptionSpec {
        kind: config.corruption.kind,
        count: config.corruption.count,
        rng: root.split(streams::CORRUPT),
    };
    let (train, corruption) = corrupt(&clean, &spec)?;
    let pool = build_pool(train.mask(), config.pool_size, &root.split(streams::POOL))?;
    let model = Model::new(config.model.spec_for(&train))?;
    let train_config = config.train.to_config(train.len(), root, None);
    train_config.validate(train.len())?;
    Ok(SeedSetup {
        seed,
        train,
        holdout,
        corruption,
        pool,
        model,
        train_config,
    })
}

/// LiveVal hook that also snapshots cumulative values at epoch boundaries.
pub struct EpochSnapshots {
    pub engine: LiveVal,
    pub snapshots: Vec<Vec<f64>>,
    enabled: bool,
}

impl EpochSnapshots {
    pub fn new(engine: LiveVal, enabled: bool) -> Self {
        Self {
            engine,
            snapshots: Vec::new(),
            enabled,
        }
    }
}

impl TrainHook for EpochSnapshots {
    fn on_step(&mut self, ctx: &StepContext<'_>, record: &StepRecord, theta: &ParamVector) -> Result<()> {
        self.engine.observe(ctx.model, ctx.dataset, record, theta)?;
        if self.enabled && record.step % ctx.steps_per_epoch == 0 {
            let ledger = self.engine.provisional_ledger(ctx.model, ctx.dataset)?;
            self.snapshots.push(ledger.cumulative().to_vec());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LiveValRun {
    pub engine: LiveVal,
    pub epoch_snapshots: Vec<Vec<f64>>,
    pub final_params: ParamVector,
    pub resources: ResourceStats,
}

/// Trains once with LiveVal attached.
pub fn run_liveval(setup: &SeedSetup, valuation: ValuationConfig, snapshots: bool) -> Result<LiveValRun> {
    let (out, resources) = measure(|| -> Result<_> {
        let engine = LiveVal::new(valuation, setup.train.len(), setup.train_config.total_steps)?;
        let mut hook = EpochSnapshots::new(engine, snapshots);
        let outcome = Trainer::new(&setup.model, &setup.train, &setup.train_config).run(&mut [&mut hook])?;
        Ok((hook, outcome.final_params))
    });
    let (hook, final_params) = out?;
    Ok(LiveValRun {
        engine: hook.engine,
        epoch_snapshots: hook.snapshots,
        final_params,
        resources,
    })
}

/// Runs one baseline on a prepared seed. GradNd and IF train their own model.
pub fn run_baseline(setup: &SeedSetup, method: BaselineMethod, config: &BaselinesConfig) -> Result<BaselineResult> {
    let (model, train, tc) = (&setup.model, &setup.train, &setup.train_config);
    match method {
        BaselineMethod::Loo => {
            let pool: Vec<usize> = match config.loo_pool {
                Some(n) => setup.pool.iter().copied().take(n).collect(),
                None => setup.pool.clone(),
            };
            loo_value(model, train, tc, &pool)
        }
        BaselineMethod::Gradnd => {
            let ((collector, train_stats), outer) = measure(|| {
                measure(|| -> Result<CheckpointCollector> {
                    let mut c = if config.gradnd_steps.is_empty() {
                        CheckpointCollector::first_epoch()
                    } else {
                        CheckpointCollector::at_steps(config.gradnd_steps.iter().copied())
                    };
                    Trainer::new(model, train, tc).run(&mut [&mut c])?;
                    Ok(c)
                })
            });
            let collector = collector?;
            let mut r = gradnd_value(model, train, &collector.checkpoints, &setup.pool)?;
            r.resources.wall_ms += train_stats.wall_ms;
            r.resources.peak_rss_bytes = r.resources.peak_rss_bytes.max(outer.peak_rss_bytes);
            r.details["checkpoint_steps"] = serde_json::json!(collector.steps_taken);
            Ok(r)
        }
        BaselineMethod::If => {
            if setup.holdout.is_empty() {
                return Err(Error::Parameter("influence baseline needs a held-out batch".into()));
            }
            let (trained, stats) = measure(|| Trainer::new(model, train, tc).run(&mut []));
            let trained = trained?;
            let n = config.influence.test_batch.min(setup.holdout.len());
            let test = setup.holdout.select(&(0..n).collect::<Vec<_>>());
            let mut r = if_value(model, train, &trained.final_params, &setup.pool, &test, &config.influence)?;
            r.resources.wall_ms += stats.wall_ms;
            r.resources.peak_rss_bytes = r.resources.peak_rss_bytes.max(stats.peak_rss_bytes);
            Ok(r)
        }
    }
}

// ---------------------------------------------------------------------------
// Whole experiment
// ---------------------------------------------------------------------------

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config: ExperimentConfig,
    /// Seed → SHA-256 of the corrupted training set.
    pub dataset_digests: BTreeMap<u64, String>,
    /// Seed → SHA-256 of the corruption manifest.
    pub corruption_digests: BTreeMap<u64, String>,
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig) -> Self {
        let mut notes = BTreeMap::new();
        notes.insert(
            "valuation_scope".into(),
            "all training rows are valued; detection is scored on the pool only".into(),
        );
        notes.insert(
            "loo_loss".into(),
            "mean loss over the full training set at the final step".into(),
        );
        notes.insert(
            "if_test_gradient".into(),
            "mean gradient of the first `test_batch` clean held-out rows".into(),
        );
        notes.insert(
            "step_loss".into(),
            "batch loss of B_t evaluated after the update".into(),
        );
        Self {
            artifact_version: ARTIFACT_VERSION.into(),
            config,
            dataset_digests: BTreeMap::new(),
            corruption_digests: BTreeMap::new(),
            notes,
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        hex(&Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResources {
    pub method: String,
    pub seed: u64,
    pub resources: ResourceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodValues {
    pub method: String,
    pub seed: u64,
    /// `(row, id, value)` for every valued row.
    pub values: Vec<(usize, u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub k: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub seed: u64,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub manifest: RunManifest,
    pub detections: Vec<DetectionReport>,
    pub resources: Vec<MethodResources>,
    #[serde(skip)]
    pub values: Vec<MethodValues>,
    #[serde(skip)]
    pub pools: BTreeMap<u64, Vec<usize>>,
    #[serde(skip)]
    pub masks: BTreeMap<u64, Vec<bool>>,
    pub failure: Option<StageFailure>,
}

impl ExperimentOutcome {
    /// Mean ± sample std of detected counts per method.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut by: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
        for d in &self.detections {
            by.entry((d.method.clone(), d.k)).or_default().push(d.detected as f64);
        }
        by.into_iter()
            .map(|((method, k), xs)| {
                let (mean, std) = mean_std(&xs);
                SummaryRow {
                    method,
                    k,
                    runs: xs.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn detections_for(&self, method: &str) -> Vec<&DetectionReport> {
        self.detections.iter().filter(|d| d.method == method).collect()
    }

    /// Mean wall time per method, in milliseconds.
    pub fn mean_wall_ms(&self, method: &str) -> Option<f64> {
        let xs: Vec<f64> = self
            .resources
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.resources.wall_ms)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn stage<T>(seed: u64, name: &str, r: Result<T>) -> std::result::Result<T, (StageFailure, Error)> {
    r.map_err(|e| {
        (
            StageFailure {
                seed,
                stage: name.into(),
                message: e.to_string(),
            },
            e,
        )
    })
}

/// Runs every seed. A failing stage stops the run and is reported in
/// `failure` alongside whatever completed before it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mut outcome = ExperimentOutcome {
        manifest: RunManifest::new(config.clone()),
        detections: Vec::new(),
        resources: Vec::new(),
        values: Vec::new(),
        pools: BTreeMap::new(),
        masks: BTreeMap::new(),
        failure: None,
    };
    for &seed in &config.seeds {
        if let Err((failure, _)) = run_seed(config, seed, &mut outcome) {
            outcome.failure = Some(failure);
            break;
        }
    }
    Ok(outcome)
}

fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    outcome: &mut ExperimentOutcome,
) -> std::result::Result<(), (StageFailure, Error)> {
    let setup = stage(seed, "prepare", prepare_seed(config, seed))?;
    outcome.manifest.dataset_digests.insert(seed, setup.train.digest());
    outcome
        .manifest
        .corruption_digests
        .insert(seed, setup.corruption.digest());
    outcome.pools.insert(seed, setup.pool.clone());
    outcome.masks.insert(seed, setup.train.mask().to_vec());
    let k = config.corruption.count;
    let mask = setup.train.mask();
    let ids = setup.train.ids();

    let run = stage(seed, LIVEVAL, run_liveval(&setup, config.valuation, config.early_detection))?;
    let cumulative = run.engine.ledger().cumulative();
    let mut report = stage(
        seed,
        "score-liveval",
        detection_metric(LIVEVAL, &pool_values(cumulative, &setup.pool), mask, k, &setup.pool),
    )?;
    report.seed = seed;
    if config.early_detection {
        report.per_epoch_detected = Some(stage(
            seed,
            "early-detection",
            early_detection_curve(&run.epoch_snapshots, mask, k, &setup.pool),
        )?);
        report.provisional = true;
    }
    outcome.detections.push(report);
    outcome.resources.push(MethodResources {
        method: LIVEVAL.into(),
        seed,
        resources: run.resources,
    });
    outcome.values.push(MethodValues {
        method: LIVEVAL.into(),
        seed,
        values: cumulative.iter().enumerate().map(|(i, v)| (i, ids[i], *v)).collect(),
    });

    for &method in &config.baselines.methods {
        let result = stage(seed, method.name(), run_baseline(&setup, method, &config.baselines))?;
        let covers_pool = result.values.len() == setup.pool.len();
        if covers_pool {
            let mut r = stage(
                seed,
                "score-baseline",
                detection_metric(method.name(), &result.values, mask, k, &setup.pool),
            )?;
            r.seed = seed;
            outcome.detections.push(r);
        }
        outcome.resources.push(MethodResources {
            method: method.name().into(),
            seed,
            resources: result.resources,
        });
        outcome.values.push(MethodValues {
            method: method.name().into(),
            seed,
            values: result.values.iter().map(|(&i, &v)| (i, ids[i], v)).collect(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    Csv,
    Json,
    #[default]
    All,
}

/// JSON Schema describing `results.json`.
pub const RESULTS_SCHEMA: &str = include_str!("../schemas/results.schema.json");

pub fn detection_csv(detections: &[DetectionReport]) -> String {
    let mut out = String::from("method,k,seed,detected\n");
    for d in detections {
        let _ = writeln!(out, "{},{},{},{}", d.method, d.k, d.seed, d.detected);
    }
    out
}

/// One row per `k`, `<method>_mean` / `<method>_std` columns.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let methods: Vec<&str> = {
        let mut m: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        m.sort_unstable();
        m.dedup();
        m
    };
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut out = String::from("k");
    for m in &methods {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push('\n');
    for k in ks {
        let _ = write!(out, "{k}");
        for m in &methods {
            match rows.iter().find(|r| r.k == k && r.method == *m) {
                Some(r) => {
                    let _ = write!(out, ",{:?},{:?}", r.mean, r.std);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Mean wall time and max peak RSS per method, in first-seen method order.
pub fn resources_csv(resources: &[MethodResources]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for r in resources {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    let mut out = String::from("method,wall_ms,peak_rss_bytes\n");
    for m in order {
        let rs: Vec<&ResourceStats> = resources
            .iter()
            .filter(|r| r.method == m)
            .map(|r| &r.resources)
            .collect();
        let wall = rs.iter().map(|r| r.wall_ms).sum::<f64>() / rs.len() as f64;
        let peak = rs.iter().map(|r| r.peak_rss_bytes).max().unwrap_or(0);
        let _ = writeln!(out, "{m},{wall:.3},{peak}");
    }
    out
}

pub fn values_csv(values: &[&MethodValues], pools: &BTreeMap<u64, Vec<usize>>, masks: &BTreeMap<u64, Vec<bool>>) -> String {
    let mut out = String::from("seed,sample_id,value,corrupted,in_pool\n");
    for mv in values {
        let pool = pools.get(&mv.seed);
        let mask = masks.get(&mv.seed);
        for &(row, id, v) in &mv.values {
            let in_pool = pool.is_some_and(|p| p.binary_search(&row).is_ok());
            let corrupted = mask.is_some_and(|m| m[row]);
            let _ = writeln!(out, "{},{id},{v:?},{},{}", mv.seed, corrupted as u8, in_pool as u8);
        }
    }
    out
}

pub fn results_json(outcome: &ExperimentOutcome) -> Result<String> {
    let bundle = serde_json::json!({
        "manifest": outcome.manifest,
        "summary": outcome.summary(),
        "detections": outcome.detections,
        "resources": outcome.resources,
        "failure": outcome.failure,
    });
    serde_json::to_string_pretty(&bundle).map_err(|e| Error::Serde(e.to_string()))
}

fn write_file(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes the result tables and JSON bundle into `dir`.
pub fn export_results(outcome: &ExperimentOutcome, dir: impl AsRef<Path>, format: ExportFormat) -> Result<Vec<PathBuf>> {
    if outcome.detections.is_empty() {
        return Err(Error::Parameter("no detection reports to export".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if matches!(format, ExportFormat::Csv | ExportFormat::All) {
        write_file(dir, "detection.csv", &detection_csv(&outcome.detections), &mut written)?;
        write_file(dir, "detection_summary.csv", &summary_csv(&outcome.summary()), &mut written)?;
        write_file(dir, "resources.csv", &resources_csv(&outcome.resources), &mut written)?;
        let mut methods: Vec<&str> = outcome.values.iter().map(|v| v.method.as_str()).collect();
        methods.dedup();
        methods.sort_unstable();
        methods.dedup();
        for m in methods {
            let vs: Vec<&MethodValues> = outcome.values.iter().filter(|v| v.method == m).collect();
            write_file(
                dir,
                &format!("values_{m}.csv"),
                &values_csv(&vs, &outcome.pools, &outcome.masks),
                &mut written,
            )?;
        }
        let early: Vec<&DetectionReport> = outcome
            .detections
            .iter()
            .filter(|d| d.per_epoch_detected.is_some())
            .collect();
        if !early.is_empty() {
            let mut out = String::from("method,k,seed,epoch,detected\n");
            for d in early {
                for (e, n) in d.per_epoch_detected.as_ref().unwrap().iter().enumerate() {
                    let _ = writeln!(out, "{},{},{},{},{n}", d.method, d.k, d.seed, e + 1);
                }
            }
            write_file(dir, "early_detection.csv", &out, &mut written)?;
        }
    }
    if matches!(format, ExportFormat::Json | ExportFormat::All) {
        write_file(dir, "results.json", &results_json(outcome)?, &mut written)?;
        let manifest = serde_json::to_string_pretty(&outcome.manifest).map_err(|e| Error::Serde(e.to_string()))?;
        write_file(dir, "manifest.json", &manifest, &mut written)?;
    }
    Ok(written)
}

/// Runs the volatility probe described by `config.probe` on the first seed's data.
pub fn run_probe(config: &ExperimentConfig) -> Result<VolatilityReport> {
    let seed = *config
        .seeds
        .first()
        .ok_or_else(|| Error::Parameter("at least one seed is required".into()))?;
    let setup = prepare_seed(config, seed)?;
    let mut train = setup.train_config.clone();
    if let Some(lr) = config.probe.lr {
        train.lr = lr;
    }
    if let Some(steps) = config.probe.steps {
        train.total_steps = steps;
    }
    volatility_probe(
        setup.model.spec(),
        &setup.train,
        &train,
        config.valuation,
        &config.probe.seeds,
        config.probe.hold_init,
    )
}

pub fn volatility_csv(report: &VolatilityReport) -> String {
    let mut out = String::from("sample,step,observations,std,bound,tight_bound\n");
    for e in &report.entries {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?}",
            e.sample, e.step, e.observations, e.std, e.bound, e.tight_bound
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(n: usize, bad: &[usize]) -> Vec<bool> {
        (0..n).map(|i| bad.contains(&i)).collect()
    }

    #[test]
    fn lowest_values_all_corrupted() {
        let mask = mask_of(10, &[2, 5]);
        let values: BTreeMap<usize, f64> = (0..10).map(|i| (i, if mask[i] { -1.0 } else { i as f64 })).collect();
        let pool: Vec<usize> = (0..10).collect();
        let r = detection_metric("m", &values, &mask, 2, &pool).unwrap();
        assert_eq!((r.detected, r.detection_rate), (2, 1.0));
    }

    #[test]
    fn ties_resolve_by_row() {
        let mask = mask_of(6, &[0, 4]);
        let values: BTreeMap<usize, f64> = (0..6).map(|i| (i, 0.0)).collect();
        let r = detection_metric("m", &values, &mask, 2, &[5, 4, 3, 2, 1, 0]).unwrap();
        // rows 0 and 1 are the two "lowest"; only row 0 is corrupted.
        assert_eq!(r.detected, 1);
    }

    #[test]
    fn zero_k_is_degenerate() {
        let mask = mask_of(4, &[]);
        let values: BTreeMap<usize, f64> = (0..4).map(|i| (i, i as f64)).collect();
        let r = detection_metric("m", &values, &mask, 0, &[0, 1, 2, 3]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.detected, 0);
    }

    #[test]
    fn pool_mask_mismatch() {
        let mask = mask_of(4, &[1]);
        let values: BTreeMap<usize, f64> = (0..4).map(|i| (i, 0.0)).collect();
        assert!(detection_metric("m", &values, &mask, 2, &[0, 1, 2, 3]).is_err());
        assert!(detection_metric("m", &values, &mask, 1, &[0, 2]).is_err());
    }

    #[test]
    fn random_values_match_hypergeometric_mean() {
        // E[detected] = k * k / pool = 1 for k = 10, pool = 100.
        let mask = mask_of(100, &(0..10).collect::<Vec<_>>());
        let pool: Vec<usize> = (0..100).collect();
        let trials = 4000;
        let mut total = 0;
        for t in 0..trials {
            let draws = crate::numkit::gaussian_draw(&RngState::new(t), 100, 1.0).unwrap();
            let values = pool_values(&draws, &pool);
            total += detection_metric("m", &values, &mask, 10, &pool).unwrap().detected;
        }
        let mean = total as f64 / trials as f64;
        // sd of one draw ~0.9, so the mean's standard error is ~0.015.
        assert!((mean - 1.0).abs() < 0.08, "mean {mean}");
    }

    #[test]
    fn pool_construction() {
        let mask = mask_of(300, &[3, 50, 299]);
        let pool = build_pool(&mask, 100, &RngState::new(1)).unwrap();
        assert_eq!(pool.len(), 100);
        assert_eq!(pool.iter().filter(|&&i| mask[i]).count(), 3);
        assert_eq!(pool, build_pool(&mask, 100, &RngState::new(1)).unwrap());
        assert!(build_pool(&mask, 2, &RngState::new(1)).is_err());
    }

    #[test]
    fn curve_from_zero_snapshot_uses_tie_rule() {
        let mask = mask_of(10, &[0, 9]);
        let pool: Vec<usize> = (0..10).collect();
        let curve = early_detection_curve(&[vec![0.0; 10]], &mask, 2, &pool).unwrap();
        assert_eq!(curve, vec![1]);
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let c = ExperimentConfig::default();
        let t = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&t).unwrap(), c);
        let j = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::parse(&j).unwrap(), c);
        let m = serde_json::to_string(&RunManifest::new(c.clone())).unwrap();
        assert_eq!(ExperimentConfig::parse(&m).unwrap(), c);
        assert!(ExperimentConfig::parse("seeds = 3").is_err());
    }

    #[test]
    fn export_requires_reports() {
        let outcome = ExperimentOutcome {
            manifest: RunManifest::new(ExperimentConfig::default()),
            detections: Vec::new(),
            resources: Vec::new(),
            values: Vec::new(),
            pools: BTreeMap::new(),
            masks: BTreeMap::new(),
            failure: None,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_results(&outcome, dir.path(), ExportFormat::All),
            Err(Error::Parameter(_))
        ));
    }
}
