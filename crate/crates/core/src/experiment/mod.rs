//! Config-driven experiments and their on-disk artifacts.

mod config;
mod export;
mod run;

pub use config::{ConfigError, DatasetSource, ExperimentConfig, ExperimentKind, ExperimentParams};
pub use export::{error_rows, export_filters, export_plot_data, ExportError, FilterGrid, PlotKind};
pub use run::{
    read_manifest, run_experiment, BaseSummary, Manifest, RunError, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, MANIFEST_FILE,
};
