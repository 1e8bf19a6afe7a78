//! Experiment engine: pretrain on source domains, stream each target
//! through every adapter over several seeds, and summarize the grid.

mod config;
mod report;
mod run;

pub use config::{
    default_suite, BenchConfig, DataConfig, ModelSection, ScenarioConfig, ShiftConfig, SourceConfig,
    CONFIG_VERSION,
};
pub use report::{
    aggregate, read_reports_csv, render_table, write_reports_csv, Cell, Summary, SummaryRow, TableStyle,
    CSV_COLUMNS,
};
pub use run::{
    base_domain, feature_similarity, measure_latency, run_bench, run_method, run_scenario, sample_sources,
    sample_target, source_specs, target_spec, RunReport, SourceBundle, TargetBundle,
};
