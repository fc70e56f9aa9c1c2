//! Repeated-split evaluation: runs every selected method on fresh
//! train/eval/test partitions, aggregates per-repeat metrics, tests the
//! paired differences and writes the report set.

mod audit;
mod config;
mod context;
mod experiment;
mod registry;
mod report;
pub mod stats;

pub use audit::{AuditSummary, LabelVault, Partition};
pub use config::{DataSource, ExperimentConfig, CONFIG_SCHEMA, STANDARD_METHODS};
pub use context::RepeatContext;
pub use experiment::{aggregate_rows, run_experiment, run_on_dataset, ExperimentOutput};
pub use registry::{FrameMethod, Registry, Selection, TraitMethod, TraitOutput};
pub use report::{
    emit_report, next_frame_csv, render_summary, traits_csv, AggregateRow, Comparison, DatasetSummary, EvalReport,
    Failure, Metrics, Provenance, RepeatRecord, MEAN_TASK, NEXT_FRAME, REPORT_SCHEMA,
};
pub use stats::{aggregate, corrected_resampled_ttest, stars, Summary, TTest};
