//! Particle belief over traffic-driver parameters and its control-conditioned
//! prediction along a planning horizon.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vehicle::{DriverParams, Dynamics, EgoControl, JointState};
use crate::ConfigError;

/// One hypothesis: behavior parameters for every traffic vehicle.
pub type Theta = Vec<DriverParams>;

/// Yield gains above this count as "friendly" in belief summaries.
pub const FRIENDLY_THRESHOLD: f64 = 0.5;

/// `exp` underflows to zero below this argument.
const LOG_UNDERFLOW: f64 = -745.0;

/// Closed interval sampled uniformly; `lo == hi` is a point mass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

/// Prior for one traffic driver: independent uniform IDM parameters and a
/// two-component mixture on the yield gain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverPrior {
    pub desired_speed: Interval,
    pub time_headway: Interval,
    pub min_gap: Interval,
    pub max_accel: Interval,
    pub comfort_decel: Interval,
    /// Probability of the friendly component.
    pub p_friendly: f64,
    pub friendly_yield: Interval,
    pub aggressive_yield: Interval,
}

impl DriverPrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DriverParams {
        let desired_speed = self.desired_speed.sample(rng);
        let time_headway = self.time_headway.sample(rng);
        let min_gap = self.min_gap.sample(rng);
        let max_accel = self.max_accel.sample(rng);
        let comfort_decel = self.comfort_decel.sample(rng);
        let friendly = rng.random_bool(self.p_friendly);
        let yield_gain = if friendly {
            self.friendly_yield.sample(rng)
        } else {
            self.aggressive_yield.sample(rng)
        };
        DriverParams { desired_speed, time_headway, min_gap, max_accel, comfort_decel, yield_gain }
    }

    pub fn mean(&self) -> DriverParams {
        DriverParams {
            desired_speed: self.desired_speed.mean(),
            time_headway: self.time_headway.mean(),
            min_gap: self.min_gap.mean(),
            max_accel: self.max_accel.mean(),
            comfort_decel: self.comfort_decel.mean(),
            yield_gain: self.p_friendly * self.friendly_yield.mean()
                + (1.0 - self.p_friendly) * self.aggressive_yield.mean(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [self.desired_speed, self.time_headway, self.min_gap, self.max_accel, self.comfort_decel];
        let ok = positive.iter().all(|r| r.lo > 0.0 && r.lo <= r.hi && r.hi.is_finite())
            && [self.friendly_yield, self.aggressive_yield]
                .iter()
                .all(|r| r.lo >= 0.0 && r.lo <= r.hi && r.hi.is_finite())
            && (0.0..=1.0).contains(&self.p_friendly);
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("invalid driver prior: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPrior {
    pub vehicles: Vec<DriverPrior>,
}

impl ParameterPrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Theta {
        self.vehicles.iter().map(|v| v.sample(rng)).collect()
    }

    pub fn mean(&self) -> Theta {
        self.vehicles.iter().map(DriverPrior::mean).collect()
    }
}

/// Normalizes `log_weights` in place into probabilities (log-sum-exp).
fn normalize_log(log_weights: &[f64], out: &mut [f64]) {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(log_weights) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Multiplies `weights` by `exp(log_lik)` and renormalizes. `log_kernel` is
/// the part of each log-likelihood that would be exponentiated without a
/// normalizing constant; if every kernel underflows the weights are left
/// untouched and `false` is returned.
fn reweight(weights: &mut [f64], log_lik: &[f64], log_kernel: &[f64]) -> bool {
    let alive = weights.iter().zip(log_kernel).any(|(&w, &k)| w > 0.0 && k.is_finite() && k > LOG_UNDERFLOW);
    if !alive {
        return false;
    }
    let logs: Vec<f64> = weights
        .iter()
        .zip(log_lik)
        .map(|(&w, &l)| if w > 0.0 && l.is_finite() { w.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    normalize_log(&logs, weights);
    true
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn belief_entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: Vec<Theta>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    /// Draws `n_p` particles i.i.d. from the prior with uniform weights.
    pub fn from_prior<R: Rng + ?Sized>(prior: &ParameterPrior, n_p: usize, rng: &mut R) -> Self {
        assert!(n_p >= 1, "particle count must be positive");
        let particles = (0..n_p).map(|_| prior.sample(rng)).collect();
        Self { particles, weights: vec![1.0 / n_p as f64; n_p] }
    }

    /// Draws `n_p / 2^n_v` physical parameter vectors from the prior and pairs
    /// each with every friendly/aggressive label combination, weighted by the
    /// prior label probabilities. Observations that do not exercise the yield
    /// term then leave the label marginals exactly at the prior.
    ///
    /// Falls back to [`ParticleSet::from_prior`] when `n_p < 2^n_v`.
    pub fn from_prior_stratified<R: Rng + ?Sized>(prior: &ParameterPrior, n_p: usize, rng: &mut R) -> Self {
        let n_v = prior.vehicles.len();
        let combos = 1usize.checked_shl(n_v as u32).filter(|&c| c <= n_p);
        let Some(combos) = combos else {
            return Self::from_prior(prior, n_p, rng);
        };
        let groups = n_p / combos;
        let mut particles = Vec::with_capacity(groups * combos);
        let mut weights = Vec::with_capacity(groups * combos);
        for _ in 0..groups {
            let base = prior.sample(rng);
            // one gain per vehicle and label, shared by the whole group
            let gains: Vec<[f64; 2]> =
                prior.vehicles.iter().map(|v| [v.aggressive_yield.sample(rng), v.friendly_yield.sample(rng)]).collect();
            for c in 0..combos {
                let mut w = 1.0 / groups as f64;
                let theta = base
                    .iter()
                    .zip(&prior.vehicles)
                    .enumerate()
                    .map(|(i, (p, v))| {
                        let friendly = c >> i & 1 == 1;
                        w *= if friendly { v.p_friendly } else { 1.0 - v.p_friendly };
                        DriverParams { yield_gain: gains[i][friendly as usize], ..*p }
                    })
                    .collect();
                particles.push(theta);
                weights.push(w);
            }
        }
        Self { particles, weights }
    }

    /// Uniformly weighted set over the given hypotheses.
    pub fn uniform(particles: Vec<Theta>) -> Self {
        assert!(!particles.is_empty(), "particle count must be positive");
        let n = particles.len();
        Self { particles, weights: vec![1.0 / n as f64; n] }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn n_traffic(&self) -> usize {
        self.particles[0].len()
    }

    /// Bayes update with one observed transition. Returns `false` (weights
    /// unchanged) when every particle assigns the observation zero density.
    pub fn update_weights(&mut self, dynamics: &Dynamics, observed_next: &JointState, current: &JointState, u: EgoControl) -> bool {
        let n = observed_next.dim();
        let mut r = vec![0.0; n];
        let mut log_lik = Vec::with_capacity(self.len());
        let mut log_kernel = Vec::with_capacity(self.len());
        for theta in &self.particles {
            let mean = dynamics.deterministic_step(current, u, theta);
            observed_next.difference_into(&mean, &mut r);
            let m = dynamics.noise.mahalanobis_sq(&r);
            log_kernel.push(-0.5 * m);
            log_lik.push(dynamics.noise.log_density(&r));
        }
        reweight(&mut self.weights, &log_lik, &log_kernel)
    }

    pub fn entropy(&self) -> f64 {
        belief_entropy(&self.weights)
    }

    /// Posterior mean of each traffic driver's parameters.
    pub fn mean(&self) -> Theta {
        let n_v = self.n_traffic();
        let mut acc = vec![[0.0; DriverParams::DIM]; n_v];
        for (theta, &w) in self.particles.iter().zip(&self.weights) {
            for (a, p) in acc.iter_mut().zip(theta) {
                for (ai, pi) in a.iter_mut().zip(p.to_array()) {
                    *ai += w * pi;
                }
            }
        }
        acc.into_iter().map(DriverParams::from_array).collect()
    }

    /// Posterior probability that each traffic driver is friendly.
    pub fn friendly_probability(&self) -> Vec<f64> {
        (0..self.n_traffic())
            .map(|i| {
                self.particles
                    .iter()
                    .zip(&self.weights)
                    .filter(|(theta, _)| theta[i].yield_gain > FRIENDLY_THRESHOLD)
                    .map(|(_, &w)| w)
                    .sum()
            })
            .collect()
    }

    /// Weighted multinomial draw of `n_hat` particles for horizon prediction.
    pub fn resample_predicted<R: Rng + ?Sized>(&self, n_hat: usize, rng: &mut R) -> PredictedBelief {
        assert!(n_hat >= 1, "predicted particle count must be positive");
        let index = WeightedIndex::new(&self.weights).expect("particle weights form a distribution");
        let particles = (0..n_hat).map(|_| self.particles[index.sample(rng)].clone()).collect();
        PredictedBelief::new(particles)
    }
}

/// Predicted belief `ŵ_{k|t}` for `k = t..t+N` over a fixed particle draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedBelief {
    pub particles: Vec<Theta>,
    /// Entry `k` holds the weights at horizon step `t + k`.
    pub weights_by_step: Vec<Vec<f64>>,
    /// Set when a propagation step found all likelihoods numerically zero.
    pub degenerate: bool,
}

impl PredictedBelief {
    pub fn new(particles: Vec<Theta>) -> Self {
        let n = particles.len();
        Self { particles, weights_by_step: vec![vec![1.0 / n as f64; n]], degenerate: false }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn latest(&self) -> &[f64] {
        self.weights_by_step.last().expect("weights at step t always exist")
    }

    /// Drops every step after `t`, keeping the particles.
    pub fn reset(&mut self) {
        self.weights_by_step.truncate(1);
        self.degenerate = false;
    }

    /// Appends the step-`k+1` weights given the particle-averaged prediction
    /// `expected_next` and the step-`k` state `current` at which each
    /// particle's own deterministic prediction is evaluated.
    pub fn propagate(&mut self, dynamics: &Dynamics, expected_next: &JointState, current: &JointState, planned_u: EgoControl) {
        let mut r = vec![0.0; expected_next.dim()];
        let log_kernel: Vec<f64> = self
            .particles
            .iter()
            .map(|theta| {
                let mean = dynamics.deterministic_step(current, planned_u, theta);
                expected_next.difference_into(&mean, &mut r);
                -0.5 * dynamics.noise.mahalanobis_sq(&r)
            })
            .collect();
        self.push_from_log_kernel(&log_kernel);
    }

    /// Appends the next weights from per-particle log-likelihoods (up to a
    /// shared constant).
    pub fn push_from_log_kernel(&mut self, log_kernel: &[f64]) {
        let mut next = self.latest().to_vec();
        if !reweight(&mut next, log_kernel, log_kernel) {
            self.degenerate = true;
        }
        self.weights_by_step.push(next);
    }

    /// Appends a copy of the current weights (frozen belief).
    pub fn push_frozen(&mut self) {
        let next = self.latest().to_vec();
        self.weights_by_step.push(next);
    }

    pub fn entropy_by_step(&self) -> Vec<f64> {
        self.weights_by_step.iter().map(|w| belief_entropy(w)).collect()
    }
}
