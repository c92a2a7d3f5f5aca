//! Training-integrated data valuation.
//!
//! Samples are valued by how a hypothetical update along their own gradient
//! moves the parameters relative to a reference state later in the same
//! training run. [`valuation::basic_valuate`] uses the final parameters as the
//! reference; [`valuation::LiveVal`] uses an adaptive window and runs as a
//! training hook. [`baselines`] holds leave-one-out, influence-function and
//! gradient-norm comparators, and [`experiment`] scores all of them on a
//! label- or feature-corruption detection task.

pub mod baselines;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numkit;
pub mod resources;
pub mod trainer;
pub mod valuation;

pub use baselines::{BaselineMethod, BaselineResult, IfConfig};
pub use dataio::{CorruptionKind, CorruptionManifest, CorruptionSpec, CsvSchema, Dataset};
pub use error::{Error, ErrorClass, Result};
pub use experiment::{
    detection_metric, run_experiment, DetectionReport, ExperimentConfig, ExperimentOutcome,
    RunManifest,
};
pub use model::{LossKind, Model, ModelSpec, ParamVector};
pub use numkit::{RealVector, RngState};
pub use resources::ResourceStats;
pub use trainer::{LrSchedule, Sampling, StepRecord, TrainConfig, TrainHook, Trainer};
pub use valuation::{
    basic_valuate, step_value, Denominator, LiveVal, LossRateMode, StepValue, ValuationConfig,
    ValuationLedger, WindowParams,
};
