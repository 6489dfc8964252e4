//! Configuration, seeded execution, run logs and reports.

mod config;
mod report;
mod run;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    load_config, parse_config, AnalysisConfig, BackendConfig, BackendKind, ConfigError, ExperimentConfig, NavExperiment, OutputConfig,
};
pub use report::{analyze, report, report_rows, write_report_csv, ReportRow, REPORT_COLUMNS, REPORT_CSV};
pub use run::{
    build_controller, execute, load_suite, read_run_log, read_suite, read_wall_times, run_log_path, run_nav_experiment, run_strategy,
    write_suite, ExecutionSummary, LogHeader, NavSummary, RunLog, NAV_METRICS_CSV, SCHEMA_VERSION, SUMMARY_JSON,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Log { path: PathBuf, line: usize, message: String },
    #[error("{path}: schema version {found}, expected {expected}")]
    SchemaVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("run logs mix schema versions {0} and {1}")]
    MixedSchema(u32, u32),
    #[error("no run logs given")]
    NoLogs,
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Controller(#[from] crate::controller::ControllerError),
    #[error(transparent)]
    Backend(#[from] crate::agents::BackendError),
    #[error(transparent)]
    Nav(#[from] crate::nav::NavError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
