//! Experiment configuration, the training loop, metrics and seed sweeps.

pub mod config;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use config::{AnnotatorKind, Mode, RewardSource, RunConfig};
pub use metrics::{parse_csv, render_csv, summarize, MetricsRow, CSV_HEADER};
pub use run::{evaluate, run_experiment, run_to_dir, RunOutput, SessionAudit};
pub use sweep::{parse_seeds, sweep, sweep_to_dir};
