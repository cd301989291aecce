//! Experiment harness: configuration, the finite-difference gradient
//! oracle, metric helpers, posterior prediction, and the artifact-writing
//! experiment runner behind the CLI.

mod config;
mod experiment;
mod fd;
mod metrics;
mod predict;

pub use config::{
    AlgorithmId, DataSection, DataSource, ExperimentConfig, ModelId, ModelParamsSection,
    OptimizerSection, SfviAvgSection, SfviSection,
};
pub use experiment::{
    build_model, build_test_data, build_train_data, run_experiment, RunArtifacts,
};
pub use fd::fd_gradient_oracle;
pub use metrics::{accuracy, gaussian_kl, gaussian_kl_univariate};
pub use predict::posterior_predict;
