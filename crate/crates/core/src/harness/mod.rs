//! Batch evaluation: dataset ingestion, run configuration, benchmark runs,
//! threshold sweeps, policy comparisons, and report emission.

pub mod config;
pub mod convert;
pub mod dataset;
pub mod report;
pub mod run;

use thiserror::Error;

pub use config::{BackendSettings, Caps, PoolSettings, RelevanceSettings, RunConfig, Shots, TauSentinel, TauSetting};
pub use convert::{convert_dataset, ConvertOptions, ConvertSummary, SourceFormat};
pub use dataset::{load_dataset, write_dataset, DatasetError, Sample, Split};
pub use report::{build_report, RunReport, TraceRow};
pub use run::{
    compare_policies, parse_grid, parse_policies, run_benchmark, sweep_tau, trace_file_name, BenchmarkRun,
    ComparisonReport, PolicyRow, RunOptions, ScoreBook, ScriptBook, SweepRow, SweepTable, API_KEY_ENV,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Dataset(_) => 3,
            HarnessError::Io(_) => 1,
        }
    }
}
