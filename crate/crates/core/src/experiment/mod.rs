//! Experiment harness: configs, data, training, reports and benches.
//!
//! A run is fully determined by its [`ExperimentConfig`]: the seed drives
//! data generation, initialization, batch order and every stochastic loss
//! term through separate streams.

pub mod bench;
pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use bench::{bench, BenchReport, BenchRow};
pub use config::{DatasetSpec, DecoderSpec, ExperimentConfig, ExperimentKind, ModelSpec, OptimizerSpec};
pub use data::ExperimentData;
pub use model::{Model, ModelFile, SplitEval, TppDecoder};
pub use train::{train, train_with, EpochRow, RunReport, TrainOutcome};
