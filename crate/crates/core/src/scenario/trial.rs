//! Closed-loop merge trials.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{FriendlyAssignment, ScenarioConfig};
use super::cost::MergeCost;
use super::metrics::{Outcome, TrialResult};
use super::trace::{write_record, BeliefSummary, Events, PlanSummary, StepRecord, TraceHeader, TraceRecord, TRACE_SCHEMA_VERSION};
use crate::belief::{ParticleSet, Theta};
use crate::controller::{Controller, ControllerKind};
use crate::rng::{tags, SimRng, StreamSeed};
use crate::vehicle::{DriverParams, Dynamics, EgoControl, JointState, VehicleState};
use crate::ConfigError;

/// Initial condition and ground truth of one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSetup {
    pub start: JointState,
    pub truth: Theta,
    pub friendly: Option<usize>,
    pub merge_end_x: f64,
}

impl TrialSetup {
    /// Randomized design: platoon speed, gaps, ego offset, IDM parameters
    /// and the friendly vehicle are drawn from the config's intervals.
    pub fn generate(cfg: &ScenarioConfig, seed: u64) -> Self {
        let mut rng = StreamSeed::new(seed).child(tags::INSTANCE).rng();
        let t = &cfg.traffic;
        let n_v = cfg.n_traffic;
        let speed = t.initial_speed.sample(&mut rng);
        let pitch = 2.0 * cfg.traffic_geometry.half_length;
        let mut traffic = Vec::with_capacity(n_v);
        let mut x = 0.0;
        for i in 0..n_v {
            if i > 0 {
                x += pitch + t.initial_gap.sample(&mut rng);
            }
            traffic.push(VehicleState::new(speed, 0.0, x, cfg.road.main_lane_y));
        }
        let friendly = match t.friendly {
            FriendlyAssignment::Random => Some(if n_v > 1 { rng.random_range(0..n_v - 1) } else { 0 }),
            FriendlyAssignment::Index(i) => Some(i),
            FriendlyAssignment::None => None,
        };
        let prior = cfg.prior();
        let truth = prior
            .vehicles
            .iter()
            .enumerate()
            .map(|(i, p)| DriverParams {
                yield_gain: if friendly == Some(i) { t.friendly_yield } else { t.aggressive_yield },
                ..p.sample(&mut rng)
            })
            .collect();
        let ego_x = cfg.start.ego_offset.sample(&mut rng);
        let ego = VehicleState::new(speed, 0.0, ego_x, cfg.road.merge_lane_y);
        Self { start: JointState::new(ego, traffic), truth, friendly, merge_end_x: ego_x + cfg.road.merge_window }
    }
}

use rand::Rng as _;

#[cfg(not(target_arch = "wasm32"))]
fn clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn clock() -> Option<std::time::Instant> {
    None
}

/// A running trial: world, belief, controller and metric accumulators.
pub struct Episode {
    pub config: ScenarioConfig,
    pub kind: ControllerKind,
    pub seed: u64,
    pub setup: TrialSetup,
    pub dynamics: Dynamics,
    pub cost: MergeCost,
    controller: Controller,
    world: JointState,
    truth: Theta,
    belief: ParticleSet,
    belief_degenerate: bool,
    world_rng: SimRng,
    last: Option<(JointState, EgoControl)>,
    step: usize,
    merged_at: Option<f64>,
    min_clearance: f64,
    accel_sum: f64,
    cycle_ms: Vec<f64>,
    outcome: Option<Outcome>,
}

impl Episode {
    pub fn new(cfg: &ScenarioConfig, kind: ControllerKind, seed: u64) -> Result<Self, ConfigError> {
        Self::with_setup(cfg, kind, seed, TrialSetup::generate(cfg, seed))
    }

    pub fn with_setup(cfg: &ScenarioConfig, kind: ControllerKind, seed: u64, setup: TrialSetup) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if setup.truth.len() != cfg.n_traffic || setup.start.n_traffic() != cfg.n_traffic {
            return Err(ConfigError::Invalid("trial setup does not match n_traffic".into()));
        }
        let root = StreamSeed::new(seed);
        let mut prior_rng = root.child(tags::PRIOR_PARTICLES).rng();
        let belief = if cfg.filter.stratify_labels {
            ParticleSet::from_prior_stratified(&cfg.prior(), cfg.filter.n_particles, &mut prior_rng)
        } else {
            ParticleSet::from_prior(&cfg.prior(), cfg.filter.n_particles, &mut prior_rng)
        };
        let cost = MergeCost::new(cfg, setup.merge_end_x);
        let min_clearance = cost.clearance(&setup.start);
        Ok(Self {
            config: cfg.clone(),
            kind,
            seed,
            dynamics: cfg.dynamics()?,
            cost,
            controller: Controller::new(kind, cfg.planner.clone())?,
            world: setup.start.clone(),
            truth: setup.truth.clone(),
            belief,
            belief_degenerate: false,
            world_rng: root.child(tags::WORLD).rng(),
            last: None,
            step: 0,
            merged_at: None,
            min_clearance,
            accel_sum: 0.0,
            cycle_ms: Vec::new(),
            outcome: None,
            setup,
        })
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            schema_version: TRACE_SCHEMA_VERSION,
            controller: self.kind,
            seed: self.seed,
            friendly: self.setup.friendly,
            truth: self.setup.truth.clone(),
            start: self.setup.start.clone(),
            merge_end_x: self.setup.merge_end_x,
        }
    }

    pub fn state(&self) -> &JointState {
        &self.world
    }

    pub fn belief(&self) -> &ParticleSet {
        &self.belief
    }

    pub fn belief_summary(&self) -> BeliefSummary {
        BeliefSummary::of(&self.belief, self.belief_degenerate)
    }

    pub fn truth(&self) -> &Theta {
        &self.truth
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.dt
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn last_cycle_ms(&self) -> Option<f64> {
        self.cycle_ms.last().copied()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    /// Overrides one driver's yield gain from the next step on.
    pub fn set_yield(&mut self, vehicle: usize, gain: f64) {
        self.truth[vehicle].yield_gain = gain;
    }

    /// Overrides one driver's minimum gap from the next step on.
    pub fn set_min_gap(&mut self, vehicle: usize, gap: f64) {
        self.truth[vehicle].min_gap = gap;
    }

    /// Restores one driver's ground-truth parameters.
    pub fn restore_driver(&mut self, vehicle: usize) {
        self.truth[vehicle] = self.setup.truth[vehicle];
    }

    /// Observe, update the belief, plan, apply the first control and advance
    /// the world. Returns `None` once the trial has ended.
    pub fn step(&mut self) -> Option<StepRecord> {
        if self.is_done() {
            return None;
        }
        if let Some((prev, u)) = &self.last {
            self.belief_degenerate = !self.belief.update_weights(&self.dynamics, &self.world, prev, *u);
        }
        let started = clock();
        let plan = self.controller.plan(
            &self.world,
            &self.belief,
            &self.dynamics,
            &self.cost,
            StreamSeed::new(self.seed).path(&[tags::PLANNER, self.step as u64]),
        );
        if let Some(s) = started {
            self.cycle_ms.push(s.elapsed().as_secs_f64() * 1e3);
        }
        let control = self.dynamics.bounds.clamp(plan.control);
        let next = self.dynamics.step(&self.world, control, &self.truth, &mut self.world_rng);

        let violations = self.cost.violations(&next);
        let clearance = self.cost.clearance(&next);
        self.min_clearance = self.min_clearance.min(clearance);
        self.accel_sum += control.accel.abs();
        if self.merged_at.is_none() && self.cost.merge_complete(&next) {
            self.merged_at = Some(next.ego.x - self.setup.start.ego.x);
        }
        let record = StepRecord {
            step: self.step,
            t: self.time(),
            state: self.world.clone(),
            control,
            belief: self.belief_summary(),
            planner: PlanSummary::from(&plan.diagnostics),
            events: Events::new(self.merged_at.is_some(), violations),
            clearance,
        };

        self.last = Some((std::mem::replace(&mut self.world, next), control));
        self.step += 1;
        self.outcome = if self.merged_at.is_some() {
            Some(Outcome::Merged)
        } else if violations.collision {
            Some(Outcome::Collision)
        } else if self.world.ego.x - self.setup.start.ego.x > self.config.road.merge_window || self.cost.slots_passed(&self.world) {
            Some(Outcome::WindowExceeded)
        } else if self.time() >= self.config.duration_cap - 1e-9 {
            Some(Outcome::Timeout)
        } else {
            None
        };
        Some(record)
    }

    /// Metrics so far; final once [`Episode::is_done`].
    pub fn result(&self) -> TrialResult {
        let window = self.config.road.merge_window;
        TrialResult {
            controller: self.kind,
            seed: self.seed,
            outcome: self.outcome.unwrap_or(Outcome::Timeout),
            merge_success: self.merged_at.is_some(),
            merge_distance: self.merged_at.map_or(window, |d| d.min(window)),
            min_distance: self.min_clearance,
            avg_abs_accel: if self.step == 0 { 0.0 } else { self.accel_sum / self.step as f64 },
            steps: self.step,
            cycle_ms: self.cycle_ms.clone(),
        }
    }
}

/// Runs one trial to completion, streaming the trace to `trace` if given.
pub fn run_trial(
    cfg: &ScenarioConfig,
    kind: ControllerKind,
    seed: u64,
    mut trace: Option<&mut dyn Write>,
) -> Result<TrialResult, TrialError> {
    let mut ep = Episode::new(cfg, kind, seed)?;
    if let Some(w) = trace.as_deref_mut() {
        write_record(w, &TraceRecord::Header(ep.header()))?;
    }
    while let Some(rec) = ep.step() {
        if let Some(w) = trace.as_deref_mut() {
            write_record(w, &TraceRecord::Step(rec))?;
        }
    }
    let result = ep.result();
    if let Some(w) = trace.as_deref_mut() {
        write_record(w, &TraceRecord::Result(result.clone()))?;
        w.flush()?;
    }
    Ok(result)
}

/// File name of a trial trace inside a batch output directory.
pub fn trace_file_name(kind: ControllerKind, seed: u64) -> String {
    format!("trace_{}_{seed:04}.jsonl", kind.name())
}

/// Runs `seeds` in order; writes one trace file per trial into `trace_dir`.
pub fn run_batch(
    cfg: &ScenarioConfig,
    kind: ControllerKind,
    seeds: &[u64],
    trace_dir: Option<&Path>,
    mut on_trial: impl FnMut(&TrialResult),
) -> Result<Vec<TrialResult>, TrialError> {
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let result = match trace_dir {
            Some(dir) => {
                let mut w = BufWriter::new(File::create(dir.join(trace_file_name(kind, seed)))?);
                run_trial(cfg, kind, seed, Some(&mut w))?
            }
            None => run_trial(cfg, kind, seed, None)?,
        };
        on_trial(&result);
        results.push(result);
    }
    Ok(results)
}

#[derive(Debug, thiserror::Error)]
pub enum TrialError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("failed to write trace: {0}")]
    Io(#[from] io::Error),
}
