//! Task cost, penalty indicators and merge predicates of the merge scenario.

use serde::{Deserialize, Serialize};

use super::config::{CostConfig, MergeConfig, RoadConfig, ScenarioConfig};
use crate::controller::TaskCost;
use crate::vehicle::{EgoControl, JointState, VehicleGeometry, VehicleState};

/// Which penalty indicators fire in a state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violations {
    pub collision: bool,
    pub road: bool,
    pub invalid: bool,
}

impl Violations {
    pub fn count(&self) -> u32 {
        self.collision as u32 + self.road as u32 + self.invalid as u32
    }
}

/// Scenario geometry and cost for one trial; `merge_end_x` is where the
/// merge lane stops.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeCost {
    pub cost: CostConfig,
    pub road: RoadConfig,
    pub merge: MergeConfig,
    pub ego_geometry: VehicleGeometry,
    pub traffic_geometry: VehicleGeometry,
    pub merge_end_x: f64,
}

/// Gap between two intervals; zero when they overlap.
fn interval_gap(center_a: f64, half_a: f64, center_b: f64, half_b: f64) -> f64 {
    ((center_a - center_b).abs() - half_a - half_b).max(0.0)
}

impl MergeCost {
    pub fn new(cfg: &ScenarioConfig, merge_end_x: f64) -> Self {
        Self {
            cost: cfg.cost.clone(),
            road: cfg.road.clone(),
            merge: cfg.merge.clone(),
            ego_geometry: cfg.ego_geometry,
            traffic_geometry: cfg.traffic_geometry,
            merge_end_x,
        }
    }

    fn half_lane(&self) -> f64 {
        0.5 * self.road.lane_width
    }

    /// Axis-aligned footprint overlap between the ego and traffic vehicle.
    pub fn overlaps(&self, ego: &VehicleState, other: &VehicleState) -> bool {
        (ego.x - other.x).abs() < self.ego_geometry.half_length + self.traffic_geometry.half_length
            && (ego.y - other.y).abs() < self.ego_geometry.half_width + self.traffic_geometry.half_width
    }

    /// Distance between axis-aligned footprints; zero when they touch.
    pub fn footprint_distance(&self, ego: &VehicleState, other: &VehicleState) -> f64 {
        let dx = interval_gap(ego.x, self.ego_geometry.half_length, other.x, self.traffic_geometry.half_length);
        let dy = interval_gap(ego.y, self.ego_geometry.half_width, other.y, self.traffic_geometry.half_width);
        dx.hypot(dy)
    }

    /// Smallest footprint distance from the ego to any traffic vehicle.
    pub fn clearance(&self, x: &JointState) -> f64 {
        x.traffic.iter().map(|o| self.footprint_distance(&x.ego, o)).fold(f64::INFINITY, f64::min)
    }

    /// Lower road edge at the ego's front bumper.
    pub fn road_lower_edge(&self, front_x: f64) -> f64 {
        if front_x <= self.merge_end_x {
            self.road.merge_lane_y - self.half_lane()
        } else {
            self.road.main_lane_y - self.half_lane()
        }
    }

    pub fn in_main_lane(&self, ego: &VehicleState) -> bool {
        (ego.y - self.road.main_lane_y).abs() < self.half_lane()
    }

    /// In-lane neighbors of the ego: nearest traffic behind and ahead by X.
    pub fn neighbors<'a>(&self, x: &'a JointState) -> (Option<&'a VehicleState>, Option<&'a VehicleState>) {
        let ego_x = x.ego.x;
        let behind = x.traffic.iter().filter(|o| o.x <= ego_x).max_by(|a, b| a.x.total_cmp(&b.x));
        let ahead = x.traffic.iter().filter(|o| o.x > ego_x).min_by(|a, b| a.x.total_cmp(&b.x));
        (behind, ahead)
    }

    /// Ego X lies between two traffic vehicles (or ahead of the lead when allowed).
    pub fn between_vehicles(&self, x: &JointState) -> bool {
        match self.neighbors(x) {
            (Some(_), Some(_)) => true,
            (Some(_), None) => self.merge.ahead_of_lead_valid,
            _ => false,
        }
    }

    /// Every valid slot now lies beyond the end of the merge lane: the ego
    /// would have to be fully past the rear-most vehicle's front bumper.
    pub fn slots_passed(&self, x: &JointState) -> bool {
        let rear = x.traffic.iter().map(|o| o.x).fold(f64::INFINITY, f64::min);
        rear + self.traffic_geometry.half_length + self.merge.min_clearance + 2.0 * self.ego_geometry.half_length > self.merge_end_x
    }

    pub fn violations(&self, x: &JointState) -> Violations {
        let ego = &x.ego;
        let g = &self.ego_geometry;
        let upper = self.road.main_lane_y + self.half_lane();
        let lower = self.road_lower_edge(ego.x + g.half_length);
        Violations {
            collision: x.traffic.iter().any(|o| self.overlaps(ego, o)),
            road: ego.y + g.half_width > upper || ego.y - g.half_width < lower,
            invalid: self.in_main_lane(ego) && !self.between_vehicles(x),
        }
    }

    pub fn penalty(&self, x: &JointState) -> f64 {
        self.violations(x).count() as f64 * self.cost.q_pen
    }

    fn tracking(&self, ego: &VehicleState, w: &[f64; 4]) -> f64 {
        let e = [ego.v - self.cost.v_goal, ego.psi, ego.x, ego.y - self.road.main_lane_y];
        e.iter().zip(w).map(|(e, w)| w * e * e).sum()
    }

    /// Merge is complete: centered in the main lane, aligned with it, and in
    /// a slot with the required clearance to both neighbors.
    pub fn merge_complete(&self, x: &JointState) -> bool {
        let ego = &x.ego;
        if (ego.y - self.road.main_lane_y).abs() > self.merge.lateral_tol || ego.psi.abs() > self.merge.heading_tol {
            return false;
        }
        let reach = self.ego_geometry.half_length + self.traffic_geometry.half_length;
        match self.neighbors(x) {
            (Some(rear), front) => {
                let rear_ok = ego.x - rear.x - reach >= self.merge.min_clearance;
                let front_ok = match front {
                    Some(f) => f.x - ego.x - reach >= self.merge.min_clearance,
                    None => self.merge.ahead_of_lead_valid,
                };
                rear_ok && front_ok
            }
            (None, _) => false,
        }
    }
}

impl TaskCost for MergeCost {
    fn stage(&self, x: &JointState, u: EgoControl) -> f64 {
        let r = &self.cost.r;
        self.tracking(&x.ego, &self.cost.q) + r[0] * u.accel * u.accel + r[1] * u.steer * u.steer + self.penalty(x)
    }

    fn terminal(&self, x: &JointState) -> f64 {
        self.tracking(&x.ego, &self.cost.q_f) + self.penalty(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost() -> MergeCost {
        MergeCost::new(&ScenarioConfig::default(), 15.0)
    }

    fn platoon(ego: VehicleState) -> JointState {
        JointState::new(
            ego,
            vec![
                VehicleState::new(1.0, 0.0, 0.0, 0.0),
                VehicleState::new(1.0, 0.0, 1.2, 0.0),
                VehicleState::new(1.0, 0.0, 2.4, 0.0),
            ],
        )
    }

    #[test]
    fn goal_state_costs_nothing() {
        let c = cost();
        let x = platoon(VehicleState::new(1.0, 0.0, 0.6, 0.0));
        assert_eq!(c.violations(&x), Violations::default());
        // X weight is zero by default, so X does not matter
        assert_eq!(c.stage(&x, EgoControl::default()), 0.0);
    }

    #[test]
    fn merge_lane_is_clean() {
        let c = cost();
        let x = platoon(VehicleState::new(1.0, 0.0, 0.6, -0.6));
        assert_eq!(c.penalty(&x), 0.0);
    }

    #[test]
    fn each_indicator_fires_alone() {
        let c = cost();
        let collision = platoon(VehicleState::new(1.0, 0.0, 0.2, -0.2));
        assert_eq!(c.violations(&collision), Violations { collision: true, ..Default::default() });
        let road = platoon(VehicleState::new(1.0, 0.0, 0.6, -0.8));
        assert_eq!(c.violations(&road), Violations { road: true, ..Default::default() });
        let invalid = platoon(VehicleState::new(1.0, 0.0, -1.0, 0.0));
        assert_eq!(c.violations(&invalid), Violations { invalid: true, ..Default::default() });
        assert!(c.stage(&collision, EgoControl::default()) >= c.cost.q_pen);
    }

    #[test]
    fn merge_lane_ends_at_window() {
        let c = cost();
        let before = platoon(VehicleState::new(1.0, 0.0, 14.0, -0.6));
        let after = platoon(VehicleState::new(1.0, 0.0, 15.0, -0.6));
        assert!(!c.violations(&before).road);
        assert!(c.violations(&after).road);
    }

    #[test]
    fn merge_predicate_examples() {
        let c = cost();
        assert!(!c.merge_complete(&platoon(VehicleState::new(1.0, 0.0, 0.6, -0.6))));
        assert!(c.merge_complete(&platoon(VehicleState::new(1.0, 0.0, 0.6, 0.0))));
        assert!(!c.merge_complete(&platoon(VehicleState::new(1.0, 0.3, 0.6, 0.0))));
        assert!(!c.merge_complete(&platoon(VehicleState::new(1.0, 0.0, -1.0, 0.0))));
    }

    #[test]
    fn slots_pass_with_the_rear_vehicle() {
        let c = cost();
        let mut x = platoon(VehicleState::new(1.0, 0.0, 14.0, -0.6));
        assert!(!c.slots_passed(&x));
        for (i, o) in x.traffic.iter_mut().enumerate() {
            o.x = 14.3 + 1.2 * i as f64;
        }
        assert!(c.slots_passed(&x));
    }

    #[test]
    fn clearance_examples() {
        let c = cost();
        let x = platoon(VehicleState::new(1.0, 0.0, 0.6, -0.6));
        // vertical gap 0.6 - 0.3; horizontal gap 0.6 - 0.5
        assert!((c.clearance(&x) - (0.3f64).hypot(0.1)).abs() < 1e-12);
    }
}
