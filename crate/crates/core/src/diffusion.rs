//! Receding-horizon model-based diffusion over control sequences.
//!
//! All kernel matrices are diagonal and stored as vectors over the flattened
//! sequence, so every linear-algebra operation is elementwise.
//!
//! Indexing: forward kernel `τ` maps level `τ` to level `τ + 1` with
//! `y ← M_τ y + B_τ z`, where `M_τ = I + Ã^τ` is configured directly. The
//! level-`τ` marginal given `y⁰` is `N(D_τ y⁰, Σ_τ)` with
//! `D_τ = M_{τ-1}⋯M_0` and `Σ_τ` from the covariance recursion; reversing
//! level `τ` to `τ - 1` uses kernel `τ - 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::par::par_map;
use crate::rng::{tags, StreamSeed};
use crate::vehicle::EgoControl;
use crate::ConfigError;

/// Number of inputs per control step.
pub const CONTROL_DIM: usize = 2;

/// Horizon of ego controls flattened as `[a_0, δ_0, a_1, δ_1, ...]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence(pub Vec<f64>);

impl ControlSequence {
    pub fn zeros(horizon: usize) -> Self {
        Self(vec![0.0; horizon * CONTROL_DIM])
    }

    pub fn constant(horizon: usize, u: EgoControl) -> Self {
        Self((0..horizon).flat_map(|_| [u.accel, u.steer]).collect())
    }

    pub fn from_controls(controls: &[EgoControl]) -> Self {
        Self(controls.iter().flat_map(|u| [u.accel, u.steer]).collect())
    }

    pub fn horizon(&self) -> usize {
        self.0.len() / CONTROL_DIM
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn control(&self, k: usize) -> EgoControl {
        EgoControl::new(self.0[CONTROL_DIM * k], self.0[CONTROL_DIM * k + 1])
    }

    pub fn controls(&self) -> impl Iterator<Item = EgoControl> + '_ {
        self.0.chunks_exact(CONTROL_DIM).map(|c| EgoControl::new(c[0], c[1]))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    /// Drops the first control and repeats the last one.
    pub fn shifted(&self) -> Self {
        let n = self.0.len();
        let mut out = self.0[CONTROL_DIM.min(n)..].to_vec();
        out.extend_from_slice(&self.0[n.saturating_sub(CONTROL_DIM)..]);
        Self(out)
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

/// Reverse-step drift applied to the current level before the score term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseDrift {
    /// `(I - Ã)u`, i.e. `(2I - M)u`: first-order inverse of the forward kernel.
    #[default]
    Linearized,
    /// Exact inverse `M⁻¹u`.
    Inverse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseMode {
    #[default]
    Ode,
    Sde,
}

/// Forward kernels `{M_τ, B_τ}` for `τ = 0..n_d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    multipliers: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
    pub drift: ReverseDrift,
}

impl DiffusionSchedule {
    /// `multipliers[τ]` and `noise[τ]` are the diagonals of `M_τ` and `B_τ`.
    pub fn new(multipliers: Vec<Vec<f64>>, noise: Vec<Vec<f64>>, drift: ReverseDrift) -> Result<Self, ConfigError> {
        if multipliers.is_empty() || multipliers.len() != noise.len() {
            return Err(ConfigError::Invalid("schedule needs one multiplier and one noise scale per step".into()));
        }
        let dim = multipliers[0].len();
        for (m, b) in multipliers.iter().zip(&noise) {
            if m.len() != dim || b.len() != dim {
                return Err(ConfigError::Invalid("schedule diagonals must share one dimension".into()));
            }
            if m.iter().any(|&c| !c.is_finite() || c == 0.0) {
                return Err(ConfigError::Invalid("forward multiplier must be invertible".into()));
            }
            if b.iter().any(|&c| !c.is_finite() || c == 0.0) {
                return Err(ConfigError::Invalid("forward noise must be positive definite".into()));
            }
        }
        Ok(Self { multipliers, noise, drift })
    }

    /// Same scalar multiplier and noise scale on every coordinate.
    pub fn scalar(dim: usize, multipliers: &[f64], noise: &[f64], drift: ReverseDrift) -> Result<Self, ConfigError> {
        Self::new(
            multipliers.iter().map(|&m| vec![m; dim]).collect(),
            noise.iter().map(|&b| vec![b; dim]).collect(),
            drift,
        )
    }

    /// Variance-preserving schedule: `M_τ = √(1-β_τ)`, `B_τ = √β_τ·σ_u` with
    /// a linear ramp of `β` and per-input scales `sigma_u` repeated over the
    /// horizon.
    pub fn variance_preserving(
        horizon: usize,
        n_d: usize,
        beta: (f64, f64),
        sigma_u: [f64; CONTROL_DIM],
    ) -> Result<Self, ConfigError> {
        if n_d == 0 {
            return Err(ConfigError::Invalid("at least one diffusion step is required".into()));
        }
        if !(0.0 < beta.0 && beta.0 <= beta.1 && beta.1 < 1.0) {
            return Err(ConfigError::Invalid(format!("beta ramp must lie in (0, 1): {beta:?}")));
        }
        let betas: Vec<f64> = (0..n_d)
            .map(|tau| if n_d == 1 { beta.0 } else { beta.0 + (beta.1 - beta.0) * tau as f64 / (n_d - 1) as f64 })
            .collect();
        let multipliers = betas.iter().map(|b| vec![(1.0 - b).sqrt(); horizon * CONTROL_DIM]).collect();
        let noise = betas
            .iter()
            .map(|b| (0..horizon).flat_map(|_| sigma_u.map(|s| b.sqrt() * s)).collect())
            .collect();
        Self::new(multipliers, noise, ReverseDrift::Linearized)
    }

    /// Single-step kernel under which one reverse ODE step is the MPPI
    /// update: `Ã = I`, `B = 2σ`, exact-inverse drift. Importance samples are
    /// then drawn from `N(u/2, σ²)` and the update returns their weighted mean.
    pub fn mppi_reduction(horizon: usize, sigma_u: [f64; CONTROL_DIM]) -> Result<Self, ConfigError> {
        let dim = horizon * CONTROL_DIM;
        let b = (0..horizon).flat_map(|_| sigma_u.map(|s| 2.0 * s)).collect();
        Self::new(vec![vec![2.0; dim]], vec![b], ReverseDrift::Inverse)
    }

    pub fn n_d(&self) -> usize {
        self.multipliers.len()
    }

    pub fn dim(&self) -> usize {
        self.multipliers[0].len()
    }

    pub fn multiplier(&self, tau: usize) -> &[f64] {
        &self.multipliers[tau]
    }

    pub fn noise(&self, tau: usize) -> &[f64] {
        &self.noise[tau]
    }

    pub fn moments(&self) -> ScheduleMoments {
        ScheduleMoments::new(self)
    }
}

/// Accumulated drifts and covariances of every diffusion level.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleMoments {
    /// `drift[tau] = D_τ`, with `D_0 = I`.
    drift: Vec<Vec<f64>>,
    /// `cov[tau] = Σ_τ`, with `Σ_0 = 0`.
    cov: Vec<Vec<f64>>,
}

impl ScheduleMoments {
    pub fn new(sched: &DiffusionSchedule) -> Self {
        let dim = sched.dim();
        let mut drift = vec![vec![1.0; dim]];
        let mut cov = vec![vec![0.0; dim]];
        for tau in 0..sched.n_d() {
            let m = sched.multiplier(tau);
            let b = sched.noise(tau);
            let d: Vec<f64> = drift[tau].iter().zip(m).map(|(d, m)| d * m).collect();
            let s: Vec<f64> = cov[tau].iter().zip(m).zip(b).map(|((s, m), b)| m * s * m + b * b).collect();
            drift.push(d);
            cov.push(s);
        }
        Self { drift, cov }
    }

    pub fn n_d(&self) -> usize {
        self.drift.len() - 1
    }

    /// Product of the first `tau` multipliers.
    pub fn level_drift(&self, tau: usize) -> &[f64] {
        &self.drift[tau]
    }

    /// Covariance of level `tau` given level 0.
    pub fn level_cov(&self, tau: usize) -> &[f64] {
        &self.cov[tau]
    }

    /// Mean and standard deviation of importance samples of `u⁰` given the
    /// level-`tau` value: `N(D⁻¹u, D⁻¹ Σ D⁻ᵀ)`.
    pub fn importance_proposal(&self, u_tau: &[f64], tau: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.level_drift(tau);
        let s = self.level_cov(tau);
        let center = u_tau.iter().zip(d).map(|(u, d)| u / d).collect();
        let std = s.iter().zip(d).map(|(s, d)| s.sqrt() / d.abs()).collect();
        (center, std)
    }
}

/// `n` draws of `N(center, diag(std²))`.
pub fn gaussian_samples<R: Rng + ?Sized>(center: &[f64], std: &[f64], n: usize, rng: &mut R) -> Vec<ControlSequence> {
    (0..n)
        .map(|_| {
            ControlSequence(
                center
                    .iter()
                    .zip(std)
                    .map(|(c, s)| {
                        let z: f64 = rng.sample(StandardNormal);
                        c + s * z
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Density-weighted mean of `samples`; `None` when the total weight is not
/// a positive finite number.
pub fn weighted_mean(samples: &[ControlSequence], densities: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = densities.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let mut mean = vec![0.0; samples[0].dim()];
    for (s, d) in samples.iter().zip(densities) {
        let w = d / total;
        for (m, c) in mean.iter_mut().zip(&s.0) {
            *m += w * c;
        }
    }
    Some(mean)
}

/// One draw of level `tau` given level 0.
pub fn forward_corrupt<R: Rng + ?Sized>(mode: &ControlSequence, moments: &ScheduleMoments, tau: usize, rng: &mut R) -> ControlSequence {
    let center: Vec<f64> = mode.0.iter().zip(moments.level_drift(tau)).map(|(u, d)| u * d).collect();
    let std: Vec<f64> = moments.level_cov(tau).iter().map(|s| s.sqrt()).collect();
    gaussian_samples(&center, &std, 1, rng).pop().expect("one sample")
}

/// Importance samples of `u⁰` for the score at level `tau`.
pub fn importance_samples<R: Rng + ?Sized>(
    u_tau: &ControlSequence,
    moments: &ScheduleMoments,
    tau: usize,
    n_s: usize,
    rng: &mut R,
) -> Vec<ControlSequence> {
    let (center, std) = moments.importance_proposal(&u_tau.0, tau);
    gaussian_samples(&center, &std, n_s, rng)
}

/// Importance-sampled score of the level-`tau` marginal at `u_tau`:
/// `Σ⁻¹(D·E_w[u⁰] - u)`. Returns `None` if all densities vanish.
pub fn estimate_score(
    u_tau: &ControlSequence,
    samples: &[ControlSequence],
    densities: &[f64],
    moments: &ScheduleMoments,
    tau: usize,
) -> Option<Vec<f64>> {
    let mean = weighted_mean(samples, densities)?;
    Some(score_from_mean(&u_tau.0, &mean, moments, tau))
}

fn score_from_mean(u: &[f64], mean: &[f64], moments: &ScheduleMoments, tau: usize) -> Vec<f64> {
    let d = moments.level_drift(tau);
    let s = moments.level_cov(tau);
    (0..u.len()).map(|i| (d[i] * mean[i] - u[i]) / s[i]).collect()
}

/// Reverse step from level `tau` to `tau - 1`.
pub fn denoise_step<R: Rng + ?Sized>(
    u_tau: &ControlSequence,
    score: &[f64],
    sched: &DiffusionSchedule,
    tau: usize,
    mode: DenoiseMode,
    rng: &mut R,
) -> ControlSequence {
    assert!(tau >= 1 && tau <= sched.n_d(), "level {tau} outside 1..={}", sched.n_d());
    let m = sched.multiplier(tau - 1);
    let b = sched.noise(tau - 1);
    let gain = match mode {
        DenoiseMode::Ode => 0.5,
        DenoiseMode::Sde => 1.0,
    };
    ControlSequence(
        (0..u_tau.dim())
            .map(|i| {
                let drift = match sched.drift {
                    ReverseDrift::Linearized => (2.0 - m[i]) * u_tau.0[i],
                    ReverseDrift::Inverse => u_tau.0[i] / m[i],
                };
                let mut next = drift + gain * b[i] * b[i] * score[i];
                if mode == DenoiseMode::Sde {
                    let z: f64 = rng.sample(StandardNormal);
                    next += b[i] * z;
                }
                next
            })
            .collect(),
    )
}

/// Density and cost of one candidate sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Unnormalized optimal density `s⁰`.
    pub density: f64,
    pub cost: f64,
}

/// Objective queried by the solver, one batch at a time so implementations
/// can normalize within the batch and parallelize over it.
pub trait Target: Sync {
    fn evaluate(&self, batch: &[ControlSequence]) -> Vec<Evaluation>;
}

impl<F> Target for F
where
    F: Fn(&[ControlSequence]) -> Vec<Evaluation> + Sync,
{
    fn evaluate(&self, batch: &[ControlSequence]) -> Vec<Evaluation> {
        self(batch)
    }
}

/// Diagnostics of one solved mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeDiagnostics {
    /// Cost of the returned sequence.
    pub cost: f64,
    /// L2 norm of the score at each denoising level, last level first.
    pub score_norms: Vec<f64>,
    /// Fraction of samples carrying non-zero density at each level.
    pub density_mass: Vec<f64>,
    /// Some level had no usable density; the score was set to zero there.
    pub degenerate: bool,
    /// The target returned non-finite values; the prior center was kept.
    pub failed: bool,
}

/// The `N_m` modes carried across planning cycles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub modes: Vec<ControlSequence>,
    /// Per-mode cost from the last solve.
    pub costs: Option<Vec<f64>>,
}

impl ModeSet {
    pub fn new(modes: Vec<ControlSequence>) -> Self {
        assert!(!modes.is_empty(), "a mode set needs at least one mode");
        Self { modes, costs: None }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn shifted(&self) -> Self {
        Self { modes: self.modes.iter().map(ControlSequence::shifted).collect(), costs: None }
    }

    /// Index of the cheapest mode; ties and missing costs go to the lowest index.
    pub fn best(&self) -> usize {
        let Some(costs) = &self.costs else { return 0 };
        let mut best = 0;
        for (j, &c) in costs.iter().enumerate() {
            if c < costs[best] || (!costs[best].is_finite() && c.is_finite()) {
                best = j;
            }
        }
        best
    }
}

/// Draws one level-`N_d` sequence per mode from the receding-horizon prior.
pub fn sample_dynamic_prior(modes: &ModeSet, moments: &ScheduleMoments, seed: StreamSeed) -> ModeSet {
    let n_d = moments.n_d();
    ModeSet::new(
        modes
            .modes
            .iter()
            .enumerate()
            .map(|(j, m)| forward_corrupt(m, moments, n_d, &mut seed.path(&[tags::MODE_PRIOR, j as u64]).rng()))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Importance samples per mode and level.
    pub n_s: usize,
    pub denoise: DenoiseMode,
}

fn all_valid(evals: &[Evaluation]) -> bool {
    evals.iter().all(|e| e.density.is_finite() && e.density >= 0.0 && !e.cost.is_nan())
}

/// Denoises one prior draw down to level 0.
fn solve_mode(
    start: &ControlSequence,
    center: &ControlSequence,
    target: &dyn Target,
    sched: &DiffusionSchedule,
    moments: &ScheduleMoments,
    cfg: &SolverConfig,
    seed: StreamSeed,
) -> (ControlSequence, ModeDiagnostics) {
    let mut diag = ModeDiagnostics::default();
    let mut u = start.clone();
    for tau in (1..=sched.n_d()).rev() {
        let level = seed.path(&[tags::LEVEL, tau as u64]);
        let samples = importance_samples(&u, moments, tau, cfg.n_s, &mut level.child(tags::SOLVER).rng());
        let evals = target.evaluate(&samples);
        if !all_valid(&evals) {
            diag.failed = true;
            return (center.clone(), diag);
        }
        let densities: Vec<f64> = evals.iter().map(|e| e.density).collect();
        diag.density_mass.push(densities.iter().filter(|&&d| d > 0.0).count() as f64 / densities.len() as f64);
        let score = estimate_score(&u, &samples, &densities, moments, tau).unwrap_or_else(|| {
            diag.degenerate = true;
            vec![0.0; u.dim()]
        });
        diag.score_norms.push(score.iter().map(|s| s * s).sum::<f64>().sqrt());
        u = denoise_step(&u, &score, sched, tau, cfg.denoise, &mut level.child(tags::DENOISE).rng());
        if !u.is_finite() {
            diag.failed = true;
            return (center.clone(), diag);
        }
    }
    (u, diag)
}

/// Result of one receding-horizon solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutput {
    pub modes: ModeSet,
    pub best: usize,
    pub diagnostics: Vec<ModeDiagnostics>,
}

/// Samples the multimodal prior around `modes` (already time-shifted),
/// denoises every mode independently, and scores the results.
pub fn mpd_solve(
    modes: &ModeSet,
    target: &dyn Target,
    sched: &DiffusionSchedule,
    moments: &ScheduleMoments,
    cfg: &SolverConfig,
    seed: StreamSeed,
) -> SolveOutput {
    let prior = sample_dynamic_prior(modes, moments, seed);
    let solved = par_map(modes.len(), |j| {
        solve_mode(&prior.modes[j], &modes.modes[j], target, sched, moments, cfg, seed.path(&[tags::DENOISE, j as u64]))
    });
    finish(solved, target)
}

fn finish(solved: Vec<(ControlSequence, ModeDiagnostics)>, target: &dyn Target) -> SolveOutput {
    let (seqs, mut diagnostics): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    let final_evals = target.evaluate(&seqs);
    let costs: Vec<f64> = final_evals
        .iter()
        .zip(&mut diagnostics)
        .map(|(e, d)| {
            let c = if e.cost.is_nan() { f64::INFINITY } else { e.cost };
            d.cost = c;
            c
        })
        .collect();
    let modes = ModeSet { modes: seqs, costs: Some(costs) };
    let best = modes.best();
    SolveOutput { modes, best, diagnostics }
}

/// MPPI importance-sampling update around `prev` with diagonal covariance
/// `std²`. Returns `prev` and `false` when no sample carries density.
pub fn mppi_update<R: Rng + ?Sized>(
    prev: &ControlSequence,
    target: &dyn Target,
    std: &[f64],
    n_s: usize,
    rng: &mut R,
) -> (ControlSequence, bool) {
    let samples = gaussian_samples(&prev.0, std, n_s, rng);
    let evals = target.evaluate(&samples);
    if !all_valid(&evals) {
        return (prev.clone(), false);
    }
    let densities: Vec<f64> = evals.iter().map(|e| e.density).collect();
    match weighted_mean(&samples, &densities) {
        Some(m) => (ControlSequence(m), true),
        None => (prev.clone(), false),
    }
}

/// Single-mode MPPI cycle: one [`mppi_update`] around the warm start,
/// using the same sample stream as the level-1 solve in [`mpd_solve`].
pub fn mppi_solve(
    prev: &ControlSequence,
    target: &dyn Target,
    sigma: &[f64],
    cfg: &SolverConfig,
    seed: StreamSeed,
) -> SolveOutput {
    let level = seed.path(&[tags::DENOISE, 0, tags::LEVEL, 1]);
    let (u, ok) = mppi_update(prev, target, sigma, cfg.n_s, &mut level.child(tags::SOLVER).rng());
    let diag = ModeDiagnostics { degenerate: !ok, ..Default::default() };
    finish(vec![(u, diag)], target)
}
