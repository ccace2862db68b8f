use std::io::Write;
use std::sync::{Arc, Mutex};

use dmpd_core::controller::ControllerKind;
use dmpd_core::scenario::{run_trial, ScenarioConfig, TrialSetup};
use dmpd_core::VehicleState;
use dmpd_sim::{replay, Body, ClientCommand, Event, Session, SessionConfig};

#[derive(Clone, Default)]
struct Shared(Arc<Mutex<Vec<u8>>>);

impl Write for Shared {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl Shared {
    fn bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

fn quick() -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.duration_cap = 2.0;
    c.planner.horizon = 8;
    c.planner.n_hat = 2;
    c.planner.diffusion.n_s = 8;
    c.planner.mppi.n_s = 16;
    c.filter.n_particles = 64;
    c
}

fn run_to_end(s: &mut Session) -> Vec<dmpd_sim::ServerMessage> {
    let mut out = Vec::new();
    while !s.episode().is_done() {
        out.extend(s.tick().unwrap());
    }
    out
}

#[test]
fn session_without_commands_matches_headless_trace() {
    let cfg = quick();
    for kind in [ControllerKind::Dmpd, ControllerKind::Emppi] {
        let mut headless = Vec::new();
        run_trial(&cfg, kind, 5, Some(&mut headless)).unwrap();

        let buf = Shared::default();
        let mut s = Session::new(&cfg, kind, 5, SessionConfig::default()).unwrap();
        s.record_trace(Box::new(buf.clone())).unwrap();
        let msgs = run_to_end(&mut s);
        assert_eq!(buf.bytes(), headless, "{kind}");
        assert!(matches!(msgs.last().unwrap().body, Body::Event(Event::TrialEnd { .. })));
    }
}

#[test]
fn replayed_command_log_reproduces_trace() {
    let cfg = quick();
    let buf = Shared::default();
    let mut s = Session::new(&cfg, ControllerKind::Dmppi, 9, SessionConfig::default()).unwrap();
    s.record_trace(Box::new(buf.clone())).unwrap();
    for step in 0.. {
        match step {
            3 => {
                s.apply(ClientCommand::SetYield { target: 0, value: 1.0 }).unwrap();
            }
            5 => {
                s.apply(ClientCommand::Pause).unwrap();
                s.tick().unwrap();
                s.apply(ClientCommand::SetGapTarget { target: 1, value: 0.6 }).unwrap();
                s.apply(ClientCommand::Resume).unwrap();
            }
            8 => {
                s.apply(ClientCommand::Reset).unwrap();
            }
            7 => {
                s.release_overrides();
            }
            _ => {}
        }
        s.tick().unwrap();
        if s.episode().is_done() {
            break;
        }
    }
    let log = s.command_log().to_vec();
    assert!(log.len() >= 5);

    let again = Shared::default();
    replay(&cfg, ControllerKind::Dmppi, 9, &log, Box::new(again.clone())).unwrap();
    assert_eq!(again.bytes(), buf.bytes());
}

#[test]
fn pause_and_resume_keep_time_continuous() {
    let cfg = quick();
    let mut s = Session::new(&cfg, ControllerKind::Emppi, 2, SessionConfig::default()).unwrap();
    let mut times = Vec::new();
    for i in 0..10 {
        if i == 4 {
            s.apply(ClientCommand::Pause).unwrap();
            for _ in 0..5 {
                assert!(s.tick().unwrap().is_empty());
            }
            s.apply(ClientCommand::Resume).unwrap();
        }
        for m in s.tick().unwrap() {
            if let Body::State(_) = m.body {
                times.push((m.step, m.sim_time));
            }
        }
    }
    let steps: Vec<usize> = times.iter().map(|t| t.0).collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
    for (step, t) in times {
        assert!((t - step as f64 * cfg.dt).abs() < 1e-12);
    }
}

#[test]
fn bad_commands_are_rejected_without_side_effects() {
    let cfg = quick();
    let mut s = Session::new(&cfg, ControllerKind::Emppi, 2, SessionConfig::default()).unwrap();
    let before = s.episode().truth().clone();
    assert!(s.apply(ClientCommand::SetYield { target: 3, value: 1.0 }).is_err());
    assert!(s.apply(ClientCommand::SetYield { target: 0, value: 1.5 }).is_err());
    assert!(s.apply(ClientCommand::SetGapTarget { target: 0, value: -1.0 }).is_err());
    assert_eq!(s.episode().truth(), &before);
    assert!(s.command_log().is_empty());
}

/// Gap between vehicle 0 and its leader after `steps` steps.
fn gap_after(cfg: &ScenarioConfig, setup: &TrialSetup, yield_now: Option<f64>, steps: usize) -> Vec<f64> {
    let mut s = Session::with_setup(cfg, ControllerKind::Emppi, 4, SessionConfig::default(), setup.clone()).unwrap();
    if let Some(v) = yield_now {
        s.apply(ClientCommand::SetYield { target: 0, value: v }).unwrap();
    }
    (0..steps)
        .map(|_| {
            s.tick().unwrap();
            let t = &s.episode().state().traffic;
            t[1].x - t[0].x
        })
        .collect()
}

#[test]
fn set_yield_opens_the_gap_beside_the_ego() {
    let cfg = quick();
    let mut setup = TrialSetup::generate(&cfg, 4);
    for p in &mut setup.truth {
        p.yield_gain = 0.0;
    }
    let (x0, x1) = (setup.start.traffic[0].x, setup.start.traffic[1].x);
    let v = setup.start.traffic[0].v;
    setup.start.ego = VehicleState::new(v, 0.0, 0.5 * (x0 + x1), cfg.road.main_lane_y - 0.35);
    let initial = x1 - x0;

    let baseline = gap_after(&cfg, &setup, None, 10);
    let yielding = gap_after(&cfg, &setup, Some(1.0), 10);
    assert!(yielding.iter().any(|&g| g > initial + 0.02), "gap never grew: {yielding:?}");
    assert!(yielding[9] > baseline[9] + 0.02);
}
