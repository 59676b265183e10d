//! Experiment plumbing: config files, parameter sweeps, routing traces,
//! result tables and the self-test.

pub mod config;
pub mod experiment;
pub mod output;
pub mod selftest;
pub mod trace;

pub use config::{ExperimentConfig, OutputFormat, System};
pub use experiment::{cells, make_prompts, run_cell, run_experiment, Cell, CellRun, ResultRow};
pub use output::{emit_results, write_results, RESULT_COLUMNS};
pub use selftest::{run_selftest, sampling_tv, SelftestReport};
pub use trace::{analyze_trace, ingest_trace, read_trace, write_heatmap, write_trace, TraceFile, TraceReport};
