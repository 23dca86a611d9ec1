//! Config-driven experiment runner: grids, per-seed runs, summaries and
//! oracle split analysis.

mod dataset;
mod grid;
mod report;
mod spec;
mod split_analysis;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::models::ModelError;
use crate::pipeline::PipelineError;
use crate::splitter::SplitError;

pub use dataset::{DatasetSpec, LoadedData};
pub use grid::{expand_grid, Cell};
pub use report::{
    format_pm, mean_std, read_raw_csv, run, run_with_models, summarize, RawRow, RunOutcome,
    RunReport, RunStatus, SummaryRow, SweepOutput, FOOTNOTE,
};
pub use spec::{
    apply_env_overrides, check_spec, parse_spec, validate_config, ExperimentSpec, SweepAxes,
    ENV_JOBS, ENV_OUT_DIR,
};
pub use split_analysis::{analyze_split, SeedSplits, SplitAnalysis, TauSummary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
