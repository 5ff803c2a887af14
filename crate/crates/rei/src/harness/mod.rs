//! Datasets, metrics, verification suites, experiment presets and reports.

pub mod dataset;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod sure_check;

pub use dataset::{load_dataset, shepp_logan, synthetic_dataset, Dataset};
pub use experiment::{
    emit_figure_data, run_experiment, ExperimentConfig, ExperimentReport, FigureRow,
};
pub use gradcheck::{gradcheck_all, GradCheckResult};
pub use metrics::psnr;
pub use sure_check::{sure_check, BiasReport, DenoiserSpec};
