use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::belief::{DriverPrior, Interval, ParameterPrior};
use crate::controller::{DiffusionConfig, MppiConfig, PlannerConfig};
use crate::diffusion::DenoiseMode;
use crate::vehicle::{ControlBounds, Dynamics, EgoControl, NoiseModel, TrafficModel, VehicleGeometry};
use crate::ConfigError;

/// Lane layout. The road is straight along +X; the merge lane sits below the
/// main lane and ends `merge_window` meters ahead of the ego start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadConfig {
    pub main_lane_y: f64,
    pub merge_lane_y: f64,
    pub lane_width: f64,
    pub merge_window: f64,
}

/// Standard deviations of the additive process noise per channel `[v, ψ, x, y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub ego_std: [f64; 4],
    pub traffic_std: [f64; 4],
}

/// Which traffic vehicle yields in a trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FriendlyAssignment {
    /// Uniform over the vehicles that have an in-lane leader.
    Random,
    /// Fixed 0-based traffic index.
    Index(usize),
    /// Nobody yields.
    None,
}

/// Traffic ground truth and the belief prior. Ground-truth IDM parameters
/// are drawn from the same intervals the prior uses; only the yield gain is
/// fixed by the friendly assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    pub lead: DriverPrior,
    pub follower: DriverPrior,
    pub friendly: FriendlyAssignment,
    pub friendly_yield: f64,
    pub aggressive_yield: f64,
    /// Common initial speed of the platoon.
    pub initial_speed: Interval,
    /// Initial bumper-to-bumper gaps.
    pub initial_gap: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    /// Ego X relative to the rear-most traffic vehicle.
    pub ego_offset: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// Diagonal state weights `[v, ψ, X, Y]`.
    pub q: [f64; 4],
    pub q_f: [f64; 4],
    /// Diagonal input weights `[accel, steer]`.
    pub r: [f64; 2],
    pub q_pen: f64,
    pub v_goal: f64,
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = self.q.iter().chain(&self.q_f).all(|&w| w >= 0.0 && w.is_finite())
            && self.r.iter().all(|&w| w > 0.0 && w.is_finite())
            && self.q_pen > 0.0
            && self.v_goal.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("invalid cost weights: {self:?}")))
        }
    }
}

/// Merge-completion predicate tolerances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    pub lateral_tol: f64,
    pub heading_tol: f64,
    /// Required bumper clearance to both in-lane neighbors.
    pub min_clearance: f64,
    /// Whether a slot ahead of the lead vehicle counts as a proper merge.
    pub ahead_of_lead_valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Pair each physical parameter draw with every yield-label combination.
    pub stratify_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub dt: f64,
    /// Simulated-time cap per trial (s).
    pub duration_cap: f64,
    pub n_traffic: usize,
    pub road: RoadConfig,
    pub ego_geometry: VehicleGeometry,
    pub traffic_geometry: VehicleGeometry,
    pub bounds: ControlBounds,
    pub noise: NoiseConfig,
    pub traffic_model: TrafficModel,
    pub traffic: TrafficConfig,
    pub start: StartConfig,
    pub cost: CostConfig,
    pub merge: MergeConfig,
    pub planner: PlannerConfig,
    pub filter: FilterConfig,
}

impl Default for ScenarioConfig {
    // All values are chosen for a 1/10-scale platoon, not taken from hardware.
    fn default() -> Self {
        let follower = DriverPrior {
            desired_speed: Interval::new(1.6, 2.0),
            time_headway: Interval::new(0.15, 0.25),
            min_gap: Interval::new(0.15, 0.25),
            max_accel: Interval::new(0.8, 1.2),
            comfort_decel: Interval::new(0.8, 1.2),
            p_friendly: 0.5,
            friendly_yield: Interval::new(0.8, 1.0),
            aggressive_yield: Interval::new(0.0, 0.1),
        };
        let lead = DriverPrior { desired_speed: Interval::new(0.95, 1.05), ..follower.clone() };
        Self {
            dt: 0.1,
            duration_cap: 60.0,
            n_traffic: 3,
            road: RoadConfig { main_lane_y: 0.0, merge_lane_y: -0.6, lane_width: 0.6, merge_window: 15.0 },
            ego_geometry: VehicleGeometry::default(),
            traffic_geometry: VehicleGeometry::default(),
            bounds: ControlBounds::default(),
            noise: NoiseConfig { ego_std: [0.02, 0.005, 0.005, 0.005], traffic_std: [0.02, 1e-4, 0.005, 1e-3] },
            traffic_model: TrafficModel::default(),
            traffic: TrafficConfig {
                lead,
                follower,
                friendly: FriendlyAssignment::Random,
                friendly_yield: 1.0,
                aggressive_yield: 0.0,
                initial_speed: Interval::new(0.95, 1.05),
                initial_gap: Interval::new(0.35, 0.45),
            },
            start: StartConfig { ego_offset: Interval::new(-0.8, 1.2) },
            cost: CostConfig { q: [1.0, 2.0, 0.0, 2.0], q_f: [5.0, 10.0, 0.0, 10.0], r: [0.1, 0.1], q_pen: 100.0, v_goal: 1.0 },
            merge: MergeConfig { lateral_tol: 0.1, heading_tol: 0.15, min_clearance: 0.05, ahead_of_lead_valid: true },
            planner: PlannerConfig {
                horizon: 20,
                n_hat: 8,
                lambda: 1.0,
                diffusion: DiffusionConfig {
                    n_modes: 4,
                    n_d: 3,
                    beta_start: 0.2,
                    beta_end: 0.4,
                    sigma: [0.8, 0.25],
                    n_s: 48,
                    denoise: DenoiseMode::Ode,
                    initial_modes: vec![
                        EgoControl::new(0.0, 0.0),
                        EgoControl::new(0.5, 0.0),
                        EgoControl::new(-0.5, 0.0),
                        EgoControl::new(0.0, 0.1),
                    ],
                },
                mppi: MppiConfig { sigma: [0.4, 0.12], n_s: 144 },
            },
            filter: FilterConfig { n_particles: 1000, stratify_labels: true },
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.dt > 0.0 && self.duration_cap > 0.0) {
            return bad("dt and duration_cap must be positive".into());
        }
        if self.n_traffic == 0 {
            return bad("at least one traffic vehicle is required".into());
        }
        if !(self.road.merge_window > 0.0 && self.road.lane_width > 0.0) {
            return bad("merge window and lane width must be positive".into());
        }
        if let FriendlyAssignment::Index(i) = self.traffic.friendly {
            if i >= self.n_traffic {
                return bad(format!("friendly index {i} out of range for {} vehicles", self.n_traffic));
            }
        }
        if self.traffic.friendly_yield < 0.0 || self.traffic.aggressive_yield < 0.0 {
            return bad("yield gains must be nonnegative".into());
        }
        if self.filter.n_particles == 0 {
            return bad("particle count must be positive".into());
        }
        self.traffic.lead.validate()?;
        self.traffic.follower.validate()?;
        self.cost.validate()?;
        self.planner.validate()?;
        self.dynamics()?.validate(self.n_traffic)?;
        Ok(())
    }

    pub fn dynamics(&self) -> Result<Dynamics, ConfigError> {
        let var = |s: [f64; 4]| s.map(|c| c * c);
        let diag: Vec<f64> = var(self.noise.ego_std)
            .into_iter()
            .chain((0..self.n_traffic).flat_map(|_| var(self.noise.traffic_std)))
            .collect();
        let noise = NoiseModel::new(nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)))?;
        Ok(Dynamics {
            dt: self.dt,
            ego_geometry: self.ego_geometry,
            traffic_geometry: self.traffic_geometry,
            bounds: self.bounds,
            traffic: TrafficModel { lane_y: self.road.main_lane_y, ..self.traffic_model },
            noise,
        })
    }

    /// Belief prior: the lead uses the lead prior, all others the follower prior.
    pub fn prior(&self) -> ParameterPrior {
        ParameterPrior {
            vehicles: (0..self.n_traffic)
                .map(|i| if i + 1 == self.n_traffic { self.traffic.lead.clone() } else { self.traffic.follower.clone() })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut text = ScenarioConfig::default().to_toml_string();
        text.push_str("\nbogus = 1\n");
        assert!(ScenarioConfig::from_toml_str(&text).is_err());

        let cfg = ScenarioConfig { dt: -0.1, ..ScenarioConfig::default() };
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.noise.ego_std[0] = 0.0;
        assert!(cfg.validate().is_err());
    }
}
