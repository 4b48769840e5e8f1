//! Configuration, experiment orchestration and output.

pub mod config;
pub mod experiment;
pub mod trace_io;

pub use config::{preset, ExperimentConfig, PipelineMode, PolicyKind, TraceFormat, PRESETS};
pub use experiment::{
    ablation_ladder, compare_policies, policy_variants, run_experiment, sweep_microbatch,
    write_report, MetricsReport, RunMetrics, Stat,
};
pub use trace_io::emit_trace;
