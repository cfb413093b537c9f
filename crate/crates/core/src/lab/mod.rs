//! Experiment driver: configs, seeded runs with CSV metrics, sweeps with
//! best-configuration selection, change-frequency sweeps, context ablations
//! and plot-data aggregation.

mod config;
mod plotdata;
mod report;
mod run;
mod stats;
mod sweep;

pub use config::{
    sub_seed, AgentConfig, ContextSection, EnvConfig, EnvKind, ExperimentConfig, LoggingConfig, MetaSection, Stream,
    Q_META_INNER_LR,
};
pub use plotdata::{emit_plotdata, PlotKind};
pub use report::{write_ablation, write_best_configs, write_comparison, write_freq, write_sweep_summary};
pub use run::{build_runner, execute, per_100k, run_collect, run_to_bytes, run_to_file, CsvSink, MetricsRow, RunSummary, Schema};
pub use stats::{ci95, mean_std, quantile};
pub use sweep::{
    ablation_configs, apply_overrides, audit_fairness, expand, nonstationarity_sweep, relative_improvement,
    richness_ablation, run_jobs, select_best, sweep, AblationMode, AblationRow, Cell, CellSummary, Execution,
    FreqRow, FreqSpec, Improvement, NamedConfig, SeedResult, SweepSpec, Variant, VariantReport, BASELINE_NAME,
    DEFAULT_SEEDS,
};

use std::io::Write;

use thiserror::Error;

use crate::envs::EnvError;
use crate::metaopt::MetaError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("run failed: {0}")]
    Run(String),
    #[error("unfair comparison: {0}")]
    Fairness(String),
    #[error("relative improvement is undefined for a baseline mean of {0}")]
    UndefinedImprovement(f64),
    #[error("probes absent: the inputs carry no probe columns")]
    ProbesAbsent,
    #[error("seed-count mismatch: {0}")]
    SeedMismatch(String),
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl LabError {
    /// Errors caused by the user's input rather than the simulation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            LabError::Config(_)
                | LabError::Fairness(_)
                | LabError::ProbesAbsent
                | LabError::SeedMismatch(_)
                | LabError::UndefinedImprovement(_)
        )
    }
}

/// CSV writer with LF line endings.
pub fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

pub(crate) fn num_cells(env: &EnvConfig) -> usize {
    match env.kind {
        EnvKind::TwoColors => crate::envs::GRID * crate::envs::GRID,
        EnvKind::SwitchingMdps => env.width * env.height,
    }
}
