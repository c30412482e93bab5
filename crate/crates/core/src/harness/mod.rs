//! Experiment specs and the subcommands behind the `loopvit` binary.

mod commands;
mod spec;

pub use commands::{
    cmd_train, effective_policy, exit_code, resolve_spec, resolve_task, run, Command, Options, CHECKPOINT_FILE,
    METRICS_FILE, OUTPUT_SCHEMA_VERSION,
};
pub use spec::{
    apply_env_overrides, read_arc_dir, set_path, Counts, DataSource, DataSpec, EvalSpec, ExperimentSpec, Precision,
    Seeds, SweepSpec, ENV_PREFIX, SPEC_SCHEMA_VERSION,
};
