//! Wire messages exchanged over the live channel. Every frame is one JSON
//! text message.

use serde::{Deserialize, Serialize};

use dmpd_core::controller::ControllerKind;
use dmpd_core::scenario::trace::BeliefSummary;
use dmpd_core::scenario::TrialResult;
use dmpd_core::JointState;

/// Bumped on any incompatible change to [`ServerMessage`] or [`ClientCommand`].
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub schema_version: u32,
    /// Simulated time of the state the message describes (s).
    pub sim_time: f64,
    pub step: usize,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Body {
    State(JointState),
    Belief(BeliefSummary),
    Metrics(LiveMetrics),
    Event(Event),
}

/// Running values of the trial metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveMetrics {
    pub clearance: f64,
    pub min_distance: f64,
    pub distance: f64,
    pub avg_abs_accel: f64,
    /// Wall-clock planning time of the last cycle.
    pub cycle_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// First message on every connection.
    Hello {
        controller: ControllerKind,
        seed: u64,
        dt: f64,
        n_traffic: usize,
        friendly: Option<usize>,
        merge_end_x: f64,
        yield_max: f64,
        gap_range: [f64; 2],
        /// Whether this connection may send commands.
        controlling: bool,
    },
    Ack { command: ClientCommand },
    Error { message: String },
    MergeComplete,
    Collision,
    TrialEnd { result: TrialResult },
    Paused,
    Resumed,
    Reset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientCommand {
    /// Yield gain of one traffic driver.
    SetYield { target: usize, value: f64 },
    /// Minimum following gap of one traffic driver (m).
    SetGapTarget { target: usize, value: f64 },
    Pause,
    Resume,
    /// Restart the trial from its initial condition with the same seed.
    Reset,
}

impl ServerMessage {
    pub fn new(sim_time: f64, step: usize, body: Body) -> Self {
        Self { schema_version: SCHEMA_VERSION, sim_time, step, body }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}
