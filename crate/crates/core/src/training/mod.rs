//! Datasets, the Adam optimizer and the training loop for conventional and
//! ambient training.

mod adam;
mod config;
mod dataset;
mod trainer;

pub use adam::{Adam, AdamConfig, StepInfo};
pub use config::{
    ConditionerKind, DatasetSpec, ExperimentConfig, Mode, ModelSpec, PosteriorSpec, PriorSpec, TrainingSpec,
};
pub use dataset::{
    export_directory, ingest_directory, make_piecewise, make_toy2d, Dataset, PiecewiseSpec, ToyMixtureSpec,
};
pub use trainer::{build_dataset, train, MetricRow, Trainer};
