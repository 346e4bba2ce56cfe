//! Preprocessing, splitting, metrics, training loops and experiment orchestration.

mod experiment;
mod metrics;
mod preprocess;
mod split;
mod train;

pub use experiment::{
    prepare, run_experiment, run_seed, Dataset, ExperimentConfig, MetricsReport, Mode, Prepared, SeedMetrics, SeedRun,
    SieveSummary, Summary, SCHEMA_VERSION,
};
pub use metrics::{auc, weighted_ce_var, weighted_cross_entropy, weighted_nll_var, ClassWeights};
pub use preprocess::{preprocess_attributes, Preprocessed};
pub use split::{split_dataset, Split, CLEAN_TEST_YEARS};
pub use train::{objective_var, train_model, EpochRecord, Objective, Supervision, TrainConfig, TrainOutcome};
