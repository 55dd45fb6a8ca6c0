//! Suite runner, latency cost model and result emission.

mod config;
mod cost;
mod emit;
mod suite;
mod sweep;

pub use config::{episode_seed, NoiseParams, RunConfig, SuiteConfig};
pub use cost::{modeled_latency, slice_latency, CostModel};
pub use emit::{emit_results, load_labeled_traces};
pub use suite::{presample, prepare_thresholds, run_suite, run_suite_with, EpisodeRun, ReportRow, RunOutput, SuiteReport};
pub use sweep::{run_sweep, sweep_text, SweepParam, SweepRow};
