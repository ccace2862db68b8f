//! Line-delimited JSON trace records.
//!
//! Every line is one [`TraceRecord`] tagged by `kind`. Records carry no wall
//! clock data, so a trace is a pure function of config, controller and seed.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use super::cost::Violations;
use super::metrics::TrialResult;
use crate::belief::{belief_entropy, ParticleSet, Theta};
use crate::controller::{ControllerKind, PlanDiagnostics};
use crate::vehicle::{EgoControl, JointState};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefSummary {
    /// Posterior probability that each traffic vehicle yields.
    pub friendly_probability: Vec<f64>,
    /// Binary entropy of each friendly probability (nats).
    pub vehicle_entropy: Vec<f64>,
    /// Entropy of the particle weights (nats).
    pub entropy: f64,
    /// The last update found every likelihood numerically zero.
    pub degenerate: bool,
}

impl BeliefSummary {
    pub fn of(ps: &ParticleSet, degenerate: bool) -> Self {
        let friendly_probability = ps.friendly_probability();
        let vehicle_entropy = friendly_probability.iter().map(|&p| belief_entropy(&[p, 1.0 - p])).collect();
        Self { friendly_probability, vehicle_entropy, entropy: ps.entropy(), degenerate }
    }
}

/// Planner diagnostics reduced to what the trace keeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    /// `None` for modes whose cost was not finite.
    pub mode_costs: Vec<Option<f64>>,
    pub selected: usize,
    pub predicted_entropy: Vec<f64>,
    pub score_norms: Vec<Vec<f64>>,
    pub predicted_degenerate: bool,
    pub mode_failed: bool,
}

impl From<&PlanDiagnostics> for PlanSummary {
    fn from(d: &PlanDiagnostics) -> Self {
        Self {
            mode_costs: d.mode_costs.iter().map(|&c| c.is_finite().then_some(c)).collect(),
            selected: d.selected,
            predicted_entropy: d.predicted_entropy.clone(),
            score_norms: d.modes.iter().map(|m| m.score_norms.clone()).collect(),
            predicted_degenerate: d.predicted_degenerate,
            mode_failed: d.mode_failed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Events {
    pub merge_complete: bool,
    pub collision: bool,
    pub road: bool,
    pub invalid: bool,
}

impl Events {
    pub fn new(merged: bool, v: Violations) -> Self {
        Self { merge_complete: merged, collision: v.collision, road: v.road, invalid: v.invalid }
    }
}

/// One planning and simulation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Simulated time at which `state` was observed (s).
    pub t: f64,
    pub state: JointState,
    /// Control applied from `state`, after clamping.
    pub control: EgoControl,
    pub belief: BeliefSummary,
    pub planner: PlanSummary,
    /// Events in the state reached after applying `control`.
    pub events: Events,
    /// Footprint clearance in the state reached after applying `control`.
    pub clearance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub controller: ControllerKind,
    pub seed: u64,
    pub friendly: Option<usize>,
    pub truth: Theta,
    pub start: JointState,
    pub merge_end_x: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Step(StepRecord),
    Result(TrialResult),
}

pub fn write_record<W: Write + ?Sized>(w: &mut W, record: &TraceRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")
}

pub fn read_trace<R: BufRead>(r: R) -> io::Result<Vec<TraceRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
