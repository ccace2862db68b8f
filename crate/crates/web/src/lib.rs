//! WebAssembly bindings for the static demo page in `www/`. Every export
//! returns JSON text so the page needs no generated type glue.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use dmpd_core::belief::belief_entropy;
use dmpd_core::controller::{ControllerKind, RolloutContext, TaskCost, Weighting};
use dmpd_core::diffusion::{denoise_step, ControlSequence, DenoiseMode, DiffusionSchedule, ReverseDrift};
use dmpd_core::scenario::{Episode, ScenarioConfig};
use dmpd_core::{
    ControlBounds, DriverParams, Dynamics, EgoControl, JointState, NoiseModel, SimRng, TrafficModel, VehicleGeometry,
    VehicleState,
};

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo values serialize")
}

/// One merge trial stepped from the page.
#[wasm_bindgen]
pub struct MergeDemo {
    episode: Episode,
}

#[wasm_bindgen]
impl MergeDemo {
    /// `controller` is one of dmpd, dmppi, emppi, ce.
    #[wasm_bindgen(constructor)]
    pub fn new(controller: &str, seed: u64) -> Result<MergeDemo, JsError> {
        let kind: ControllerKind = controller.parse().map_err(|e: String| JsError::new(&e))?;
        let episode = Episode::new(&ScenarioConfig::default(), kind, seed).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Self { episode })
    }

    /// Trial header: geometry, merge window and the friendly vehicle.
    pub fn header(&self) -> String {
        json(&self.episode.header())
    }

    /// Advances one control cycle; returns the step record, or an empty
    /// string once the trial is over.
    pub fn step(&mut self) -> String {
        self.episode.step().map(|r| json(&r)).unwrap_or_default()
    }

    pub fn done(&self) -> bool {
        self.episode.is_done()
    }

    /// Outcome and metrics so far.
    pub fn result(&self) -> String {
        json(&self.episode.result())
    }
}

#[derive(Serialize)]
struct Histogram {
    edges: Vec<f64>,
    counts: Vec<usize>,
    /// Target density at the bin centers.
    target: Vec<f64>,
    mean: f64,
    variance: f64,
    target_mean: f64,
    target_variance: f64,
}

/// Weight, mean and standard deviation of each mixture component.
const MIX: [(f64, f64, f64); 2] = [(0.3, -1.0, 0.4), (0.7, 2.0, 0.6)];

fn mixture_density(u: f64, drift: f64, cov: f64) -> (f64, f64) {
    let (mut p, mut dp) = (0.0, 0.0);
    for &(w, m, s) in &MIX {
        let var = drift * drift * s * s + cov;
        let d = w * (-(u - drift * m).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        p += d;
        dp -= d * (u - drift * m) / var;
    }
    (p, dp)
}

/// Denoises `chains` samples through `n_d` reverse ODE steps with the exact
/// score of a two-component mixture and histograms the result.
#[wasm_bindgen]
pub fn mixture_denoise(n_d: usize, chains: usize, bins: usize, seed: u64) -> Result<String, JsError> {
    if n_d == 0 || chains < 2 || bins == 0 {
        return Err(JsError::new("need n_d >= 1, chains >= 2 and bins >= 1"));
    }
    let betas: Vec<f64> = (0..n_d).map(|t| if n_d == 1 { 0.5 } else { 1e-4 + (10.0 / n_d as f64).min(0.5) * t as f64 / (n_d - 1) as f64 }).collect();
    let m: Vec<f64> = betas.iter().map(|b| (1.0 - b).sqrt()).collect();
    let b: Vec<f64> = betas.iter().map(|b| b.sqrt()).collect();
    let sched = DiffusionSchedule::scalar(1, &m, &b, ReverseDrift::Linearized).map_err(|e| JsError::new(&e.to_string()))?;
    let moments = sched.moments();
    let (d_n, s_n) = (moments.level_drift(n_d)[0], moments.level_cov(n_d)[0]);
    let mut rng = SimRng::seed_from_u64(seed);
    let finals: Vec<f64> = (0..chains)
        .map(|_| {
            let (_, mu, s) = if rng.random::<f64>() < MIX[0].0 { MIX[0] } else { MIX[1] };
            let z: f64 = rng.sample(StandardNormal);
            let mut u = ControlSequence(vec![d_n * mu + (d_n * d_n * s * s + s_n).sqrt() * z]);
            for tau in (1..=n_d).rev() {
                let (p, dp) = mixture_density(u.0[0], moments.level_drift(tau)[0], moments.level_cov(tau)[0]);
                u = denoise_step(&u, &[dp / p], &sched, tau, DenoiseMode::Ode, &mut rng);
            }
            u.0[0]
        })
        .collect();

    let (lo, hi) = (-3.0, 5.0);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &x in &finals {
        if (lo..hi).contains(&x) {
            counts[((x - lo) / width) as usize] += 1;
        }
    }
    let mean = finals.iter().sum::<f64>() / chains as f64;
    let variance = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (chains - 1) as f64;
    let target_mean: f64 = MIX.iter().map(|(w, m, _)| w * m).sum();
    let target_variance = MIX.iter().map(|(w, m, s)| w * (s * s + m * m)).sum::<f64>() - target_mean * target_mean;
    Ok(json(&Histogram {
        edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
        counts,
        target: (0..bins).map(|i| mixture_density(lo + width * (i as f64 + 0.5), 1.0, 0.0).0).collect(),
        mean,
        variance,
        target_mean,
        target_variance,
    }))
}

#[derive(Serialize)]
struct DualEffect {
    /// Predicted probability that the follower is friendly, per step.
    friendly: Vec<f64>,
    entropy: Vec<f64>,
    /// Ego lateral position along the friendly-hypothesis rollout.
    ego_y: Vec<f64>,
}

struct NoCost;

impl TaskCost for NoCost {
    fn stage(&self, _: &JointState, _: EgoControl) -> f64 {
        0.0
    }
    fn terminal(&self, _: &JointState) -> f64 {
        0.0
    }
}

/// Predicted belief over "follower yields" versus "follower ignores the
/// ego" along a constant-control plan from beside the gap. Plans that keep
/// the ego near the lane separate the hypotheses; plans that retreat do not.
#[wasm_bindgen]
pub fn dual_effect(accel: f64, steer: f64, horizon: usize) -> Result<String, JsError> {
    if horizon == 0 || horizon > 200 || !accel.is_finite() || !steer.is_finite() {
        return Err(JsError::new("horizon must be in 1..=200 and controls finite"));
    }
    let dynamics = Dynamics {
        dt: 0.1,
        ego_geometry: VehicleGeometry::default(),
        traffic_geometry: VehicleGeometry::default(),
        bounds: ControlBounds::default(),
        traffic: TrafficModel::default(),
        noise: NoiseModel::per_vehicle_diagonal([1e-3, 1e-4, 1e-4, 1e-4], 3).map_err(|e| JsError::new(&e.to_string()))?,
    };
    let x0 = JointState::new(
        VehicleState::new(1.0, 0.0, 0.6, -0.35),
        vec![VehicleState::new(1.0, 0.0, 0.0, 0.0), VehicleState::new(1.0, 0.0, 1.4, 0.0)],
    );
    let driver = |g| DriverParams { desired_speed: 1.0, time_headway: 0.2, min_gap: 0.2, max_accel: 1.0, comfort_decel: 1.0, yield_gain: g };
    let particles = vec![vec![driver(0.0), driver(0.0)], vec![driver(1.0), driver(0.0)]];
    let ctx = RolloutContext::noiseless(&x0, particles, &dynamics, &NoCost, Weighting::Dual, horizon);
    let batch = ctx.rollout(&ControlSequence::constant(horizon, EgoControl::new(accel, steer)));
    Ok(json(&DualEffect {
        friendly: batch.weights_by_step.iter().map(|w| w[1]).collect(),
        entropy: batch.weights_by_step.iter().map(|w| belief_entropy(w)).collect(),
        ego_y: batch.states[1].iter().map(|x| x.ego.y).collect(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_demo_runs_to_the_end() {
        let mut demo = MergeDemo::new("emppi", 1).unwrap();
        let mut steps = 0;
        while !demo.step().is_empty() {
            steps += 1;
        }
        assert!(demo.done() && steps > 0);
        let result: serde_json::Value = serde_json::from_str(&demo.result()).unwrap();
        assert_eq!(result["steps"], steps);
    }

    #[test]
    fn denoised_mixture_keeps_its_moments() {
        let h: serde_json::Value = serde_json::from_str(&mixture_denoise(100, 4000, 40, 2).unwrap()).unwrap();
        let (m, tm) = (h["mean"].as_f64().unwrap(), h["target_mean"].as_f64().unwrap());
        let (v, tv) = (h["variance"].as_f64().unwrap(), h["target_variance"].as_f64().unwrap());
        assert!((m - tm).abs() < 0.1 * tm, "{m} vs {tm}");
        assert!((v - tv).abs() < 0.1 * tv, "{v} vs {tv}");
    }

    #[test]
    fn holding_the_boundary_is_informative() {
        let entropy = |steer| {
            let v: serde_json::Value = serde_json::from_str(&dual_effect(0.0, steer, 20).unwrap()).unwrap();
            v["entropy"].as_array().unwrap().last().unwrap().as_f64().unwrap()
        };
        assert!(entropy(0.0) < entropy(-0.3) - 0.1);
    }
}
