//! Optimization loop, run directories and hyperparameter grids.

mod fit;
mod grid;
mod optim;

pub use fit::{
    batch_gradients, encode_examples, fit, make_batches, FitOptions, RunDir, RunRecord, TrainConfig,
};
pub use grid::{grid_run, GridCell, GridReport, GridSpec};
pub use optim::{adam_step, clip_gradients, global_norm, AdamConfig, AdamState};
