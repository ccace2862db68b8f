//! Dual stochastic optimal control: sample-average rollout costs under a
//! control-conditioned predicted belief, the induced optimal density, and
//! the planners built on the diffusion solver.

use serde::{Deserialize, Serialize};

use crate::belief::{belief_entropy, ParticleSet, PredictedBelief, Theta};
use crate::diffusion::{
    mpd_solve, mppi_solve, ControlSequence, DenoiseMode, DiffusionSchedule, Evaluation, ModeDiagnostics, ModeSet,
    ScheduleMoments, SolverConfig, Target, CONTROL_DIM,
};
use crate::par::par_map;
use crate::rng::{tags, StreamSeed};
use crate::vehicle::{Dynamics, EgoControl, JointState};
use crate::ConfigError;

/// Stage and terminal costs of the planning problem.
pub trait TaskCost: Sync {
    fn stage(&self, x: &JointState, u: EgoControl) -> f64;
    fn terminal(&self, x: &JointState) -> f64;
}

/// `exp(-(cost - baseline)/λ)`.
pub fn optimal_density(cost: f64, baseline: f64, lambda: f64) -> f64 {
    (-(cost - baseline) / lambda).exp()
}

/// Densities of a batch of costs relative to the batch minimum.
pub fn batch_densities(costs: &[f64], lambda: f64) -> Vec<f64> {
    let baseline = costs.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    costs
        .iter()
        .map(|&c| if c.is_finite() { optimal_density(c, baseline, lambda) } else if c.is_nan() { f64::NAN } else { 0.0 })
        .collect()
}

/// How predicted weights evolve along a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Bayes-propagated with the particle-averaged prediction.
    Dual,
    /// Held at the step-`t` weights.
    Frozen,
}

/// Per-particle trajectories and weights of one evaluated control sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    /// `states[j][k]` for particle `j`, steps `0..=N`.
    pub states: Vec<Vec<JointState>>,
    pub weights_by_step: Vec<Vec<f64>>,
    pub cost: f64,
    pub degenerate: bool,
}

/// Fixed inputs of every rollout in one planning cycle.
pub struct RolloutContext<'a> {
    pub x0: &'a JointState,
    pub particles: Vec<Theta>,
    pub dynamics: &'a Dynamics,
    pub cost: &'a dyn TaskCost,
    pub weighting: Weighting,
    /// `noise[j][k]`: process noise for particle `j` at step `k`, shared by
    /// every candidate sequence.
    pub noise: Vec<Vec<Vec<f64>>>,
}

impl<'a> RolloutContext<'a> {
    /// Draws common random numbers for `horizon` steps from `seed`.
    pub fn new(
        x0: &'a JointState,
        particles: Vec<Theta>,
        dynamics: &'a Dynamics,
        cost: &'a dyn TaskCost,
        weighting: Weighting,
        horizon: usize,
        seed: StreamSeed,
    ) -> Self {
        let noise = (0..particles.len())
            .map(|j| {
                let mut rng = seed.path(&[tags::ROLLOUT_NOISE, j as u64]).rng();
                (0..horizon).map(|_| dynamics.noise.sample(&mut rng)).collect()
            })
            .collect();
        Self { x0, particles, dynamics, cost, weighting, noise }
    }

    /// Same as [`RolloutContext::new`] with all noise set to zero.
    pub fn noiseless(
        x0: &'a JointState,
        particles: Vec<Theta>,
        dynamics: &'a Dynamics,
        cost: &'a dyn TaskCost,
        weighting: Weighting,
        horizon: usize,
    ) -> Self {
        let noise = vec![vec![vec![0.0; x0.dim()]; horizon]; particles.len()];
        Self { x0, particles, dynamics, cost, weighting, noise }
    }

    pub fn cost_of(&self, u: &ControlSequence) -> f64 {
        self.run(u, false).cost
    }

    pub fn rollout(&self, u: &ControlSequence) -> RolloutBatch {
        self.run(u, true)
    }

    fn run(&self, u: &ControlSequence, record: bool) -> RolloutBatch {
        let n_hat = self.particles.len();
        let mut pb = PredictedBelief::new(self.particles.clone());
        let mut states: Vec<JointState> = vec![self.x0.clone(); n_hat];
        let mut history: Vec<Vec<JointState>> = if record { vec![vec![self.x0.clone()]; n_hat] } else { Vec::new() };
        let mut total = 0.0;
        for (k, uk) in u.controls().enumerate() {
            let w = pb.latest();
            total += states.iter().zip(w).map(|(x, w)| w * self.cost.stage(x, uk)).sum::<f64>();
            let next: Vec<JointState> = states
                .iter()
                .zip(&self.particles)
                .zip(&self.noise)
                .map(|((x, theta), noise)| self.dynamics.step_with_noise(x, uk, theta, &noise[k]))
                .collect();
            match self.weighting {
                Weighting::Dual if n_hat > 1 => {
                    let current = JointState::mean(&states);
                    let expected = JointState::mean(&next);
                    pb.propagate(self.dynamics, &expected, &current, uk);
                }
                _ => pb.push_frozen(),
            }
            if record {
                for (h, x) in history.iter_mut().zip(&next) {
                    h.push(x.clone());
                }
            }
            states = next;
        }
        total += states.iter().zip(pb.latest()).map(|(x, w)| w * self.cost.terminal(x)).sum::<f64>();
        RolloutBatch { states: history, degenerate: pb.degenerate, weights_by_step: pb.weights_by_step, cost: total }
    }
}

/// Batch target: SAA cost per sequence and batch-normalized density.
pub struct RolloutTarget<'a> {
    pub ctx: RolloutContext<'a>,
    pub lambda: f64,
}

impl Target for RolloutTarget<'_> {
    fn evaluate(&self, batch: &[ControlSequence]) -> Vec<Evaluation> {
        let costs = par_map(batch.len(), |i| self.ctx.cost_of(&batch[i]));
        batch_densities(&costs, self.lambda)
            .into_iter()
            .zip(costs)
            .map(|(density, cost)| Evaluation { density, cost })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// Multimodal diffusion with propagated predicted belief.
    Dmpd,
    /// Single-mode MPPI with propagated predicted belief.
    Dmppi,
    /// MPPI over a frozen particle ensemble.
    Emppi,
    /// MPPI on the belief-mean parameters.
    Ce,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [Self::Dmpd, Self::Dmppi, Self::Emppi, Self::Ce];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dmpd => "dmpd",
            Self::Dmppi => "dmppi",
            Self::Emppi => "emppi",
            Self::Ce => "ce",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Dmpd => "DMPD",
            Self::Dmppi => "DMPPI",
            Self::Emppi => "EMPPI",
            Self::Ce => "CE",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown controller '{s}' (expected dmpd, dmppi, emppi or ce)"))
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Diffusion settings of the multimodal planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub n_modes: usize,
    pub n_d: usize,
    /// Linear ramp of the per-step variance fraction `β`.
    pub beta_start: f64,
    pub beta_end: f64,
    /// Per-input noise scale `[accel, steer]`.
    pub sigma: [f64; CONTROL_DIM],
    pub n_s: usize,
    pub denoise: DenoiseMode,
    /// Constant control of each initial mode; cycled if shorter than `n_modes`.
    pub initial_modes: Vec<EgoControl>,
}

/// Settings of the single-mode MPPI planners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MppiConfig {
    /// Per-input sampling standard deviation `[accel, steer]`.
    pub sigma: [f64; CONTROL_DIM],
    pub n_s: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    /// Particles drawn from the belief for each cycle's rollouts.
    pub n_hat: usize,
    pub lambda: f64,
    pub diffusion: DiffusionConfig,
    pub mppi: MppiConfig,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.diffusion;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.horizon == 0 || self.n_hat == 0 {
            return bad("horizon and n_hat must be positive");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if d.n_modes == 0 || d.n_s == 0 || self.mppi.n_s == 0 {
            return bad("mode and sample counts must be positive");
        }
        if d.initial_modes.is_empty() {
            return bad("at least one initial mode is required");
        }
        if d.sigma.iter().chain(&self.mppi.sigma).any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("sampling scales must be positive");
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, ConfigError> {
        let d = &self.diffusion;
        DiffusionSchedule::variance_preserving(self.horizon, d.n_d, (d.beta_start, d.beta_end), d.sigma)
    }

    fn mppi_std(&self) -> Vec<f64> {
        (0..self.horizon).flat_map(|_| self.mppi.sigma).collect()
    }
}

/// Everything the planner reports about one cycle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub mode_costs: Vec<f64>,
    pub selected: usize,
    /// Entropy of the predicted weights along the selected sequence.
    pub predicted_entropy: Vec<f64>,
    pub modes: Vec<ModeDiagnostics>,
    /// Predicted-weight propagation hit an all-zero likelihood.
    pub predicted_degenerate: bool,
    /// Some mode fell back to its prior center.
    pub mode_failed: bool,
    /// Planned sequence of the selected mode.
    pub plan: ControlSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutput {
    pub control: EgoControl,
    pub diagnostics: PlanDiagnostics,
}

/// Receding-horizon planner; owns the modes carried between cycles.
#[derive(Clone, Debug)]
pub struct Controller {
    pub kind: ControllerKind,
    pub config: PlannerConfig,
    schedule: DiffusionSchedule,
    moments: ScheduleMoments,
    modes: ModeSet,
    started: bool,
}

impl Controller {
    pub fn new(kind: ControllerKind, config: PlannerConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let schedule = config.schedule()?;
        Ok(Self::with_schedule(kind, config, schedule))
    }

    /// Uses `schedule` for the diffusion planner instead of the configured ramp.
    pub fn with_schedule(kind: ControllerKind, config: PlannerConfig, schedule: DiffusionSchedule) -> Self {
        let moments = schedule.moments();
        let modes = Self::initial_modes(kind, &config);
        Self { kind, config, schedule, moments, modes, started: false }
    }

    fn initial_modes(kind: ControllerKind, config: &PlannerConfig) -> ModeSet {
        let init = &config.diffusion.initial_modes;
        let n = if kind == ControllerKind::Dmpd { config.diffusion.n_modes } else { 1 };
        ModeSet::new((0..n).map(|j| ControlSequence::constant(config.horizon, init[j % init.len()])).collect())
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn set_modes(&mut self, modes: ModeSet) {
        self.modes = modes;
        self.started = false;
    }

    pub fn reset(&mut self) {
        self.modes = Self::initial_modes(self.kind, &self.config);
        self.started = false;
    }

    /// Rollout particles for this cycle.
    fn particles(&self, belief: &ParticleSet, seed: StreamSeed) -> Vec<Theta> {
        match self.kind {
            ControllerKind::Ce => vec![belief.mean()],
            _ => belief.resample_predicted(self.config.n_hat, &mut seed.child(tags::RESAMPLE).rng()).particles,
        }
    }

    fn weighting(&self) -> Weighting {
        match self.kind {
            ControllerKind::Dmpd | ControllerKind::Dmppi => Weighting::Dual,
            ControllerKind::Emppi | ControllerKind::Ce => Weighting::Frozen,
        }
    }

    /// One planning cycle. Reads only the current state, the current belief,
    /// the carried modes and the random stream.
    pub fn plan(
        &mut self,
        x_t: &JointState,
        belief: &ParticleSet,
        dynamics: &Dynamics,
        cost: &dyn TaskCost,
        seed: StreamSeed,
    ) -> PlanOutput {
        let prior = if self.started { self.modes.shifted() } else { self.modes.clone() };
        let ctx = RolloutContext::new(
            x_t,
            self.particles(belief, seed),
            dynamics,
            cost,
            self.weighting(),
            self.config.horizon,
            seed,
        );
        let target = RolloutTarget { ctx, lambda: self.config.lambda };
        let solver_seed = seed.child(tags::SOLVER);
        let out = match self.kind {
            ControllerKind::Dmpd => {
                let cfg = SolverConfig { n_s: self.config.diffusion.n_s, denoise: self.config.diffusion.denoise };
                mpd_solve(&prior, &target, &self.schedule, &self.moments, &cfg, solver_seed)
            }
            _ => {
                let cfg = SolverConfig { n_s: self.config.mppi.n_s, denoise: DenoiseMode::Ode };
                mppi_solve(&prior.modes[0], &target, &self.config.mppi_std(), &cfg, solver_seed)
            }
        };

        let plan = out.modes.modes[out.best].clone();
        let batch = target.ctx.rollout(&plan);
        let control = plan.control(0);
        let diagnostics = PlanDiagnostics {
            mode_costs: out.modes.costs.clone().unwrap_or_default(),
            selected: out.best,
            predicted_entropy: batch.weights_by_step.iter().map(|w| belief_entropy(w)).collect(),
            mode_failed: out.diagnostics.iter().any(|d| d.failed),
            modes: out.diagnostics,
            predicted_degenerate: batch.degenerate,
            plan,
        };
        self.modes = out.modes;
        self.started = true;
        PlanOutput { control, diagnostics }
    }
}
