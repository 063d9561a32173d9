//! Trace-driven simulation: configuration, the iteration engine, reports,
//! paired comparisons and sweeps.

pub mod config;
pub mod engine;
pub mod report;
pub mod study;

pub use config::{
    load_config, load_config_str, parse_policy, Ablation, FileConfig, PredictorSettings, SimConfig,
};
pub use engine::{route_iteration, run, run_batches};
pub use report::{percentile, MetricsReport, Sample};
pub use study::{
    grid, run_comparison, sweep, ComparisonReport, MeanRatio, PolicyCdf, SweepParam, SweepPoint,
    SweepReport,
};
