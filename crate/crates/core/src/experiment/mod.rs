//! Config-driven experiment runs, results files and reports.

pub mod config;
pub mod report;
pub mod results;
pub mod run;
pub mod verify;

pub use config::ExperimentConfig;
pub use report::{cmd_report, format_table, summarize, ReportOutput, SummaryRow};
pub use results::{append_records, read_records, MetricsRecord};
pub use run::{ablation_configs, cmd_ablate, cmd_pretrain, cmd_tune, worker_threads, AblationKind, PretrainOutcome, RunResult};
