//! Correctness oracles, datasets, metrics and before/after reports.

pub mod answer;
pub mod dataset;
pub mod game24;
pub mod metrics;
pub mod report;

pub use answer::{is_correct, normalize_answer};
pub use dataset::{infer_kind, load_dataset, DatasetError};
pub use game24::{solve_game24, verify_game24};
pub use metrics::{
    aggregate, compute_accuracy, compute_calling_rate, run_benchmark, sample_tasks, BenchmarkError, BenchmarkRun,
    BenchmarkSpec, Metrics, MetricsError, RepeatEpisode, TaskSummary,
};
pub use report::{emit_report, Report, ReportRow};
