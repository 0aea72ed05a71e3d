//! Benchmark harness: scenario configuration, the simulated topology, the
//! scenario drivers and their CSV/text output.

pub mod config;
pub mod report;
pub mod scenarios;
pub mod sweep;
pub mod world;

pub use config::{ConfigError, Mode, Protocol, Scenario, ScenarioConfig};
pub use report::{sig6, MetricsReport, SweepRow};
pub use scenarios::{
    run_experiment, run_failover, run_loss_sweep, run_many, run_multistream, run_scaling,
    run_scenario, BenchError, FailoverReport, IsolationReport, MultistreamReport, Outcome,
};
