//! Experiment orchestration: configuration, runs, sweeps, metrics and the
//! self-check suite behind the CLI.

pub mod config;
pub mod metrics;
pub mod run;
pub mod sweep;
pub mod verify;

pub use config::{
    parse_config, Algorithm, DatasetConfig, ExperimentConfig, OutputConfig, PartitionKind, WirelessConfig,
};
pub use metrics::{evaluate, metrics_csv, train_centralized, write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use run::{prepare, run_detailed, run_experiment, Prepared, RunOutput};
pub use sweep::{expand, sweep, SweepConfig, SweepPoint};
pub use verify::{verify, CheckResult};
