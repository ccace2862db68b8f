//! Per-trial results, batch aggregates and their CSV exports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::trace::StepRecord;
use crate::controller::ControllerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Merged,
    /// The ego passed the end of the merge window without merging.
    WindowExceeded,
    Collision,
    /// Simulated-time cap reached.
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub controller: ControllerKind,
    pub seed: u64,
    pub outcome: Outcome,
    pub merge_success: bool,
    /// Distance traveled by the ego until the merge completed; the window
    /// length for failed trials (m).
    pub merge_distance: f64,
    /// Smallest footprint clearance to any traffic vehicle over the trial (m).
    pub min_distance: f64,
    /// Mean magnitude of the applied acceleration (m/s²).
    pub avg_abs_accel: f64,
    pub steps: usize,
    /// Wall-clock planning time of each cycle (ms). Not serialized so that
    /// traces stay reproducible.
    #[serde(skip)]
    pub cycle_ms: Vec<f64>,
}

/// Aggregate over a batch of trials with one controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    #[serde(rename = "controller")]
    pub controller: String,
    #[serde(rename = "Merge Success Rate")]
    pub success_rate: f64,
    #[serde(rename = "Ave. Merge Dist. (m)")]
    pub mean_merge_distance: f64,
    #[serde(rename = "Ave. Min. Distance (m)")]
    pub mean_min_distance: f64,
    #[serde(rename = "Ave. Acceleration (m/s^2)")]
    pub mean_abs_accel: f64,
    #[serde(rename = "trials")]
    pub trials: usize,
    #[serde(rename = "median cycle (ms)")]
    pub median_cycle_ms: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Success rate in percent and plain means of the other metrics.
pub fn summarize(controller: ControllerKind, results: &[TrialResult]) -> BatchSummary {
    let n = results.len().max(1) as f64;
    let mean = |f: fn(&TrialResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let cycles: Vec<f64> = results.iter().flat_map(|r| r.cycle_ms.iter().copied()).collect();
    BatchSummary {
        controller: controller.label().to_string(),
        success_rate: 100.0 * results.iter().filter(|r| r.merge_success).count() as f64 / n,
        mean_merge_distance: mean(|r| r.merge_distance),
        mean_min_distance: mean(|r| r.min_distance),
        mean_abs_accel: mean(|r| r.avg_abs_accel),
        trials: results.len(),
        median_cycle_ms: median(&cycles),
    }
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[BatchSummary]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrialRow<'a> {
    controller: &'a str,
    seed: u64,
    outcome: Outcome,
    merge_success: bool,
    merge_distance: f64,
    min_distance: f64,
    avg_abs_accel: f64,
    steps: usize,
}

pub fn write_trials_csv<W: Write>(w: W, results: &[TrialResult]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in results {
        out.serialize(TrialRow {
            controller: r.controller.label(),
            seed: r.seed,
            outcome: r.outcome,
            merge_success: r.merge_success,
            merge_distance: r.merge_distance,
            min_distance: r.min_distance,
            avg_abs_accel: r.avg_abs_accel,
            steps: r.steps,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Per-step time series for plotting: ego state, applied control, clearance
/// and the friendly probability of every traffic vehicle.
pub fn write_timeseries_csv<W: Write>(w: W, steps: &[StepRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n_v = steps.first().map_or(0, |s| s.state.traffic.len());
    let mut header: Vec<String> = ["t", "ego_v", "ego_psi", "ego_x", "ego_y", "accel", "steer", "clearance", "entropy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_v).map(|i| format!("p_friendly_{i}")));
    header.extend((0..n_v).map(|i| format!("traffic_x_{i}")));
    out.write_record(&header)?;
    for s in steps {
        let e = &s.state.ego;
        let mut row = vec![s.t, e.v, e.psi, e.x, e.y, s.control.accel, s.control.steer, s.clearance, s.belief.entropy];
        row.extend(&s.belief.friendly_probability);
        row.extend(s.state.traffic.iter().map(|v| v.x));
        out.write_record(row.iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(success: bool, dist: f64) -> TrialResult {
        TrialResult {
            controller: ControllerKind::Dmpd,
            seed: 0,
            outcome: if success { Outcome::Merged } else { Outcome::WindowExceeded },
            merge_success: success,
            merge_distance: dist,
            min_distance: 0.2,
            avg_abs_accel: 0.1,
            steps: 10,
            cycle_ms: vec![1.0, 3.0],
        }
    }

    #[test]
    fn single_trial_batch_is_that_trial() {
        let s = summarize(ControllerKind::Dmpd, &[result(true, 4.0)]);
        assert_eq!((s.success_rate, s.mean_merge_distance, s.mean_min_distance), (100.0, 4.0, 0.2));
        assert_eq!(s.median_cycle_ms, 2.0);
    }

    #[test]
    fn failed_trials_count_at_window_length() {
        let s = summarize(ControllerKind::Emppi, &[result(false, 15.0), result(true, 5.0)]);
        assert_eq!(s.mean_merge_distance, 10.0);
        assert_eq!(s.success_rate, 50.0);
    }

    #[test]
    fn metrics_header_matches_table_rows() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[summarize(ControllerKind::Dmpd, &[result(true, 4.0)])]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "controller,Merge Success Rate,Ave. Merge Dist. (m),Ave. Min. Distance (m),Ave. Acceleration (m/s^2)"
        ));
    }
}
