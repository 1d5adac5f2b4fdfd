//! Desk-scale multimodal benchmark: a two-tower model with a fusion head,
//! trained by hand-written backprop on synthetic paired data.

pub mod data;
pub mod experiment;
pub mod model;
pub mod snip;
pub mod train;

pub use data::{PairSetConfig, SyntheticPairSet};
pub use experiment::{
    run_experiment, run_experiment_to_dir, ExperimentConfig, ExperimentResults, ToyMethod,
};
pub use model::{ToyBatch, ToyConfig, ToyVlm};
pub use snip::{itersnip, snip_scores};
pub use train::{retrieval_accuracy, train, EvalConfig, TrainConfig, TrainState};
