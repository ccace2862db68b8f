//! Multi-vehicle dynamics: a kinematic bicycle for the ego vehicle, an
//! IDM-with-yield car-following model for traffic, and the clamped stochastic
//! transition together with its Gaussian log-density.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

/// Number of state channels per vehicle: speed, heading, x, y.
pub const VEHICLE_DIM: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Longitudinal speed (m/s).
    pub v: f64,
    /// Heading (rad).
    pub psi: f64,
    pub x: f64,
    pub y: f64,
}

impl VehicleState {
    pub const fn new(v: f64, psi: f64, x: f64, y: f64) -> Self {
        Self { v, psi, x, y }
    }

    pub fn to_array(self) -> [f64; VEHICLE_DIM] {
        [self.v, self.psi, self.x, self.y]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }
}

/// Stacked state of the ego vehicle and `n_v` traffic vehicles.
///
/// Traffic is ordered rear-most first; the last entry is the lead vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub ego: VehicleState,
    pub traffic: Vec<VehicleState>,
}

impl JointState {
    pub fn new(ego: VehicleState, traffic: Vec<VehicleState>) -> Self {
        Self { ego, traffic }
    }

    pub fn n_traffic(&self) -> usize {
        self.traffic.len()
    }

    /// Dimension of the stacked state vector.
    pub fn dim(&self) -> usize {
        VEHICLE_DIM * (1 + self.traffic.len())
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleState> {
        std::iter::once(&self.ego).chain(self.traffic.iter())
    }

    fn vehicles_mut(&mut self) -> impl Iterator<Item = &mut VehicleState> {
        std::iter::once(&mut self.ego).chain(self.traffic.iter_mut())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.vehicles().flat_map(|v| v.to_array()).collect()
    }

    pub fn from_slice(s: &[f64]) -> Self {
        assert!(s.len() >= VEHICLE_DIM && s.len() % VEHICLE_DIM == 0);
        let ego = VehicleState::from_slice(&s[..VEHICLE_DIM]);
        let traffic = s[VEHICLE_DIM..]
            .chunks_exact(VEHICLE_DIM)
            .map(VehicleState::from_slice)
            .collect();
        Self { ego, traffic }
    }

    pub fn is_finite(&self) -> bool {
        self.vehicles().all(VehicleState::is_finite)
    }

    /// Writes `self - other` into `out`.
    pub fn difference_into(&self, other: &JointState, out: &mut [f64]) {
        for (i, (a, b)) in self.vehicles().zip(other.vehicles()).enumerate() {
            let o = &mut out[i * VEHICLE_DIM..(i + 1) * VEHICLE_DIM];
            o[0] = a.v - b.v;
            o[1] = a.psi - b.psi;
            o[2] = a.x - b.x;
            o[3] = a.y - b.y;
        }
    }

    /// Component-wise mean of a non-empty set of states.
    pub fn mean<'a>(states: impl IntoIterator<Item = &'a JointState>) -> JointState {
        let mut iter = states.into_iter();
        let first = iter.next().expect("mean of empty state set");
        let mut acc = first.to_vec();
        let mut n = 1.0;
        for s in iter {
            for (a, c) in acc.iter_mut().zip(s.vehicles().flat_map(|v| v.to_array())) {
                *a += c;
            }
            n += 1.0;
        }
        acc.iter_mut().for_each(|a| *a /= n);
        JointState::from_slice(&acc)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoControl {
    /// Longitudinal acceleration (m/s²).
    pub accel: f64,
    /// Front-wheel steering angle (rad).
    pub steer: f64,
}

impl EgoControl {
    pub const fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }
}

/// Behavior parameters of one traffic driver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    /// Desired free-flow speed (m/s).
    pub desired_speed: f64,
    /// Desired time headway (s).
    pub time_headway: f64,
    /// Minimum bumper-to-bumper gap (m).
    pub min_gap: f64,
    /// Maximum acceleration (m/s²).
    pub max_accel: f64,
    /// Comfortable deceleration (m/s²), also the braking limit.
    pub comfort_decel: f64,
    /// Weight of the merging ego as a virtual leader; 0 never yields.
    pub yield_gain: f64,
}

impl DriverParams {
    pub const DIM: usize = 6;

    pub fn to_array(self) -> [f64; Self::DIM] {
        [
            self.desired_speed,
            self.time_headway,
            self.min_gap,
            self.max_accel,
            self.comfort_decel,
            self.yield_gain,
        ]
    }

    pub fn from_array(a: [f64; Self::DIM]) -> Self {
        Self {
            desired_speed: a[0],
            time_headway: a[1],
            min_gap: a[2],
            max_accel: a[3],
            comfort_decel: a[4],
            yield_gain: a[5],
        }
    }

    pub fn is_valid(&self) -> bool {
        let a = self.to_array();
        a.iter().all(|c| c.is_finite()) && a[..5].iter().all(|&c| c > 0.0) && self.yield_gain >= 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleGeometry {
    /// Center of mass to front axle (m).
    pub l_f: f64,
    /// Center of mass to rear axle (m).
    pub l_r: f64,
    /// Collision half-extent along the heading (m).
    pub half_length: f64,
    /// Collision half-extent across the heading (m).
    pub half_width: f64,
}

impl VehicleGeometry {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = [self.l_f, self.l_r, self.half_length, self.half_width]
            .iter()
            .all(|&c| c.is_finite() && c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("vehicle geometry must be positive: {self:?}")))
        }
    }
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self { l_f: 0.15, l_r: 0.15, half_length: 0.25, half_width: 0.15 }
    }
}

/// Box constraints applied to the ego input inside the transition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub accel_min: f64,
    pub accel_max: f64,
    pub steer_min: f64,
    pub steer_max: f64,
}

impl ControlBounds {
    pub fn clamp(&self, u: EgoControl) -> EgoControl {
        EgoControl {
            accel: u.accel.clamp(self.accel_min, self.accel_max),
            steer: u.steer.clamp(self.steer_min, self.steer_max),
        }
    }

    pub fn contains(&self, u: EgoControl) -> bool {
        (self.accel_min..=self.accel_max).contains(&u.accel)
            && (self.steer_min..=self.steer_max).contains(&u.steer)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.accel_min < self.accel_max && self.steer_min < self.steer_max {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("empty control bounds: {self:?}")))
        }
    }
}

impl Default for ControlBounds {
    // Chosen for a 1/10-scale car, not measured.
    fn default() -> Self {
        Self { accel_min: -1.0, accel_max: 1.0, steer_min: -0.35, steer_max: 0.35 }
    }
}

/// Kinematic slip angle at the center of mass.
///
/// Defined for steering angles in (-π/2, π/2).
pub fn slip_angle(steer: f64, geom: &VehicleGeometry) -> f64 {
    (geom.l_r / (geom.l_f + geom.l_r) * steer.tan()).atan()
}

/// Time derivative of a kinematic bicycle state, returned as `(v̇, ψ̇, ẋ, ẏ)`.
pub fn bicycle_derivative(state: &VehicleState, accel: f64, steer: f64, geom: &VehicleGeometry) -> [f64; 4] {
    let beta = slip_angle(steer, geom);
    [
        accel,
        beta.sin() * state.v / geom.l_r,
        state.v * (state.psi + beta).cos(),
        state.v * (state.psi + beta).sin(),
    ]
}

/// Parameters of the merge-reactive car-following surrogate that are common
/// to all traffic drivers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficModel {
    /// Lateral position of the traffic lane center (m).
    pub lane_y: f64,
    /// The ego signals merge intent once its lateral offset from the lane
    /// center drops below this value (m).
    pub yield_lateral_threshold: f64,
    /// The ego's rear bumper may trail a driver's front bumper by up to this
    /// much and still count as entering the gap ahead of it (m).
    pub yield_longitudinal_margin: f64,
    /// Lead vehicles only react to an ego this far ahead of them (m).
    pub yield_range: f64,
    /// Leaders beyond this distance are ignored (m).
    pub leader_range: f64,
    /// Lower bound on gaps inside the interaction terms (m).
    pub gap_floor: f64,
}

impl Default for TrafficModel {
    fn default() -> Self {
        Self {
            lane_y: 0.0,
            yield_lateral_threshold: 0.42,
            yield_longitudinal_margin: 0.25,
            yield_range: 1.5,
            leader_range: 50.0,
            gap_floor: 0.02,
        }
    }
}

/// IDM desired dynamic gap `s*`.
pub fn idm_desired_gap(p: &DriverParams, v: f64, dv: f64) -> f64 {
    p.min_gap + (v * p.time_headway + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt())).max(0.0)
}

/// Plain IDM acceleration (no yield term, no clamp). `leader` is
/// `(bumper gap, leader speed)`.
pub fn idm_accel(p: &DriverParams, v: f64, leader: Option<(f64, f64)>, gap_floor: f64) -> f64 {
    let free = p.max_accel * (1.0 - (v / p.desired_speed).powi(4));
    match leader {
        None => free,
        Some((gap, v_lead)) => {
            let s_star = idm_desired_gap(p, v, v - v_lead);
            free - p.max_accel * (s_star / gap.max(gap_floor)).powi(2)
        }
    }
}

/// Index of the closest traffic vehicle ahead of `index` and the bumper gap to it.
fn in_lane_leader(joint: &JointState, index: usize, geom: &VehicleGeometry, range: f64) -> Option<(usize, f64)> {
    let me = &joint.traffic[index];
    joint
        .traffic
        .iter()
        .enumerate()
        .filter(|&(j, o)| j != index && o.x > me.x && o.x - me.x <= range)
        .min_by(|a, b| a.1.x.total_cmp(&b.1.x))
        .map(|(j, o)| (j, o.x - me.x - 2.0 * geom.half_length))
}

/// Acceleration of traffic vehicle `index` (0-based, rear-most first).
///
/// Standard IDM toward the in-lane leader, plus a yield term: when the ego is
/// laterally close to the lane and its rear bumper is level with or ahead of
/// this driver's front bumper (less a margin) while still behind the
/// in-lane leader, the ego acts as an additional virtual leader whose IDM
/// interaction term is scaled by `yield_gain`. The result is clamped to
/// `[-comfort_decel, max_accel]`.
pub fn traffic_accel(
    joint: &JointState,
    params: &DriverParams,
    index: usize,
    model: &TrafficModel,
    ego_geom: &VehicleGeometry,
    geom: &VehicleGeometry,
) -> f64 {
    let me = &joint.traffic[index];
    let leader = in_lane_leader(joint, index, geom, model.leader_range);
    let mut accel = idm_accel(
        params,
        me.v,
        leader.map(|(j, gap)| (gap, joint.traffic[j].v)),
        model.gap_floor,
    );

    if params.yield_gain > 0.0 {
        let ego = &joint.ego;
        let lateral = (ego.y - model.lane_y).abs();
        let ego_rear = ego.x - ego_geom.half_length;
        let front = me.x + geom.half_length;
        let in_gap = match leader {
            Some((j, _)) => ego.x < joint.traffic[j].x,
            None => ego.x - me.x <= model.yield_range,
        };
        if lateral < model.yield_lateral_threshold && ego_rear > front - model.yield_longitudinal_margin && in_gap {
            let gap = ego_rear - front;
            let s_star = idm_desired_gap(params, me.v, me.v - ego.v);
            accel -= params.yield_gain * params.max_accel * (s_star / gap.max(model.gap_floor)).powi(2);
        }
    }
    accel.clamp(-params.comfort_decel, params.max_accel)
}

/// Additive Gaussian process noise over the stacked state.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    /// Per-channel standard deviations when the covariance is diagonal.
    diag_std: Option<Vec<f64>>,
    log_norm: f64,
}

impl NoiseModel {
    /// Builds the model from a full covariance; fails unless it is symmetric
    /// positive definite.
    pub fn new(cov: DMatrix<f64>) -> Result<Self, ConfigError> {
        let n = cov.nrows();
        if n == 0 || cov.ncols() != n {
            return Err(ConfigError::Invalid("noise covariance must be square and non-empty".into()));
        }
        let scale = cov.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1e-300);
        if (&cov - cov.transpose()).iter().any(|d| d.abs() > 1e-12 * scale) {
            return Err(ConfigError::Invalid("noise covariance must be symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| ConfigError::Invalid("noise covariance must be positive definite".into()))?
            .l();
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || cov[(i, j)] == 0.0));
        let diag_std = is_diag.then(|| (0..n).map(|i| chol[(i, i)]).collect());
        let log_det_half: f64 = (0..n).map(|i| chol[(i, i)].ln()).sum();
        let log_norm = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_half;
        Ok(Self { cov, chol, diag_std, log_norm })
    }

    /// Diagonal covariance repeating the per-vehicle variances `[v, ψ, x, y]`
    /// for `n_vehicles` vehicles.
    pub fn per_vehicle_diagonal(variances: [f64; VEHICLE_DIM], n_vehicles: usize) -> Result<Self, ConfigError> {
        let diag: Vec<f64> = (0..n_vehicles).flat_map(|_| variances).collect();
        Self::new(DMatrix::from_diagonal(&DVector::from_vec(diag)))
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Writes one draw of `w ~ N(0, Σ_w)` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(out.len(), n);
        match &self.diag_std {
            Some(std) => {
                for (o, s) in out.iter_mut().zip(std) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = s * z;
                }
            }
            None => {
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                for i in 0..n {
                    out[i] = (0..=i).map(|j| self.chol[(i, j)] * z[j]).sum();
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    /// Log-density of a residual under `N(0, Σ_w)`.
    pub fn log_density(&self, residual: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(residual)
    }

    /// `rᵀ Σ_w⁻¹ r`.
    pub fn mahalanobis_sq(&self, residual: &[f64]) -> f64 {
        match &self.diag_std {
            Some(std) => residual.iter().zip(std).map(|(r, s)| (r / s).powi(2)).sum(),
            None => {
                let r = DVector::from_column_slice(residual);
                let y = self
                    .chol
                    .solve_lower_triangular(&r)
                    .expect("Cholesky factor has a positive diagonal");
                y.norm_squared()
            }
        }
    }
}

/// The full stochastic transition `x_{t+1} = x_t + ẋ(x_t, σ(u_t), θ)·Δt + w_t`.
#[derive(Clone, Debug)]
pub struct Dynamics {
    pub dt: f64,
    pub ego_geometry: VehicleGeometry,
    pub traffic_geometry: VehicleGeometry,
    pub bounds: ControlBounds,
    pub traffic: TrafficModel,
    pub noise: NoiseModel,
}

impl Dynamics {
    pub fn validate(&self, n_traffic: usize) -> Result<(), ConfigError> {
        if !(self.dt > 0.0) {
            return Err(ConfigError::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        self.ego_geometry.validate()?;
        self.traffic_geometry.validate()?;
        self.bounds.validate()?;
        if self.noise.dim() != VEHICLE_DIM * (1 + n_traffic) {
            return Err(ConfigError::Invalid(format!(
                "noise dimension {} does not match {} vehicles",
                self.noise.dim(),
                1 + n_traffic
            )));
        }
        Ok(())
    }

    /// Explicit Euler step without noise and without the speed floor.
    pub fn deterministic_step(&self, joint: &JointState, u: EgoControl, theta: &[DriverParams]) -> JointState {
        debug_assert_eq!(theta.len(), joint.traffic.len());
        let u = self.bounds.clamp(u);
        let dt = self.dt;
        let advance = |s: &VehicleState, d: [f64; 4]| VehicleState {
            v: s.v + d[0] * dt,
            psi: s.psi + d[1] * dt,
            x: s.x + d[2] * dt,
            y: s.y + d[3] * dt,
        };
        let ego = advance(&joint.ego, bicycle_derivative(&joint.ego, u.accel, u.steer, &self.ego_geometry));
        let traffic = joint
            .traffic
            .iter()
            .zip(theta)
            .enumerate()
            .map(|(i, (s, p))| {
                let a = traffic_accel(joint, p, i, &self.traffic, &self.ego_geometry, &self.traffic_geometry);
                advance(s, bicycle_derivative(s, a, 0.0, &self.traffic_geometry))
            })
            .collect();
        JointState { ego, traffic }
    }

    /// Deterministic step plus the given noise vector, then the speed floor.
    pub fn step_with_noise(&self, joint: &JointState, u: EgoControl, theta: &[DriverParams], w: &[f64]) -> JointState {
        let mut next = self.deterministic_step(joint, u, theta);
        for (i, s) in next.vehicles_mut().enumerate() {
            let n = &w[i * VEHICLE_DIM..(i + 1) * VEHICLE_DIM];
            s.v = (s.v + n[0]).max(0.0);
            s.psi += n[1];
            s.x += n[2];
            s.y += n[3];
        }
        next
    }

    /// Samples `x_{t+1}`.
    pub fn step<R: Rng + ?Sized>(&self, joint: &JointState, u: EgoControl, theta: &[DriverParams], rng: &mut R) -> JointState {
        let w = self.noise.sample(rng);
        self.step_with_noise(joint, u, theta, &w)
    }

    /// Gaussian log-density of `next` given `current`. The speed floor is
    /// not modeled; it only matters for vehicles at a standstill.
    pub fn transition_logpdf(&self, next: &JointState, current: &JointState, u: EgoControl, theta: &[DriverParams]) -> f64 {
        let mean = self.deterministic_step(current, u, theta);
        self.logpdf_about(next, &mean)
    }

    /// Log-density of `next` under `N(mean, Σ_w)`.
    pub fn logpdf_about(&self, next: &JointState, mean: &JointState) -> f64 {
        let mut r = vec![0.0; next.dim()];
        next.difference_into(mean, &mut r);
        self.noise.log_density(&r)
    }
}
