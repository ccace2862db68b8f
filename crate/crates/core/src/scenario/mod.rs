//! The highway-merge environment: configuration, cost, trials and metrics.

pub mod config;
pub mod cost;
pub mod metrics;
pub mod trace;
pub mod trial;

pub use config::ScenarioConfig;
pub use cost::{MergeCost, Violations};
pub use metrics::{summarize, BatchSummary, Outcome, TrialResult};
pub use trace::{StepRecord, TraceRecord};
pub use trial::{run_batch, run_trial, trace_file_name, Episode, TrialError, TrialSetup};
