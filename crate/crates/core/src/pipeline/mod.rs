//! Experiment configuration, the embedding network, the staged training
//! loop and run outputs.

pub mod analysis;
pub mod config;
pub mod model;
pub mod run;
pub mod train;

pub use config::{ExperimentConfig, LearningRates, Method, RawConfig, StepCounts};
pub use model::Embedder;
pub use run::{
    count_parameters, eval_csv, evaluate, finish_run, from_checkpoint, load_data, metrics_csv, resume_experiment,
    run_experiment, run_on_data, to_checkpoint, ParamCounts, RunOutput,
};
pub use train::{step_rng, JointGraph, Stage, StepRecord, TrainState};
