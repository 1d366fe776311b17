//! Command implementations behind the `shield` binary.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_diagnose, cmd_evaluate, cmd_gen_dataset, cmd_judge, cmd_precompute_bias, cmd_sweep,
    default_grid, load_dataset, DiagnosticsReport, EvalOutcome, JudgeSummary, Report, SampleLine,
    SweepRow,
};
pub use config::{ConfigError, Mode, RunConfig, SamplerKind};
