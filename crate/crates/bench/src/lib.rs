//! Fixtures shared by the benchmarks.

use liveval::dataio::{synth_gaussian_blobs, Dataset};
use liveval::model::{Model, ModelSpec};
use liveval::numkit::RngState;
use liveval::trainer::{LrSchedule, Sampling, TrainConfig};

/// Two-class blobs with `n` rows and an MLP with one hidden layer.
pub fn problem(n: usize, dim: usize, hidden: usize) -> (Model, Dataset) {
    let ds = synth_gaussian_blobs(&RngState::new(1), n / 2, 2, dim, 3.0).expect("valid blob parameters");
    let model = Model::new(ModelSpec::mlp(vec![dim, hidden, 2])).expect("valid widths");
    (model, ds)
}

pub fn train_config(steps: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        batch_size,
        lr: LrSchedule::Constant { lr: 0.1 },
        rng: RngState::new(2),
        sampling: Sampling::EpochPermutation,
        init_seed: None,
    }
}
