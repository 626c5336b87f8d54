//! Synthetic data, dataset files and experiment runners.

pub mod dataset;
pub mod experiment;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, Dataset, Domain, Split};
pub use experiment::{
    run_experiment, run_methods, run_sweep, DataSource, ExperimentReport, ExperimentSpec, Method,
    SeedResult, SweepPoint,
};
pub use synth::{gen_synthetic_shift, split_nshot, SyntheticSpec};
