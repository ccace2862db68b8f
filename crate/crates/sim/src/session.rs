//! One interactive trial, independent of any transport.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use dmpd_core::controller::ControllerKind;
use dmpd_core::scenario::trace::{write_record, TraceRecord};
use dmpd_core::scenario::{Episode, ScenarioConfig, TrialError, TrialSetup};

use crate::protocol::{Body, ClientCommand, Event, LiveMetrics, ServerMessage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Upper bound accepted by `set_yield`.
    pub yield_max: f64,
    /// Accepted range of `set_gap_target` (m).
    pub gap_range: [f64; 2],
    /// Broadcast state, belief and metrics every this many steps. Events are
    /// always sent immediately.
    pub broadcast_every: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { yield_max: 1.0, gap_range: [0.05, 1.5], broadcast_every: 1 }
    }
}

/// A command together with the step it was applied before.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedCommand {
    pub step: usize,
    pub command: ClientCommand,
}

pub struct Session {
    scenario: ScenarioConfig,
    kind: ControllerKind,
    seed: u64,
    setup: TrialSetup,
    config: SessionConfig,
    episode: Episode,
    paused: bool,
    overridden: Vec<usize>,
    log: Vec<LoggedCommand>,
    trace: Option<Box<dyn Write + Send>>,
}

impl Session {
    pub fn new(scenario: &ScenarioConfig, kind: ControllerKind, seed: u64, config: SessionConfig) -> Result<Self, TrialError> {
        Self::with_setup(scenario, kind, seed, config, TrialSetup::generate(scenario, seed))
    }

    pub fn with_setup(
        scenario: &ScenarioConfig,
        kind: ControllerKind,
        seed: u64,
        config: SessionConfig,
        setup: TrialSetup,
    ) -> Result<Self, TrialError> {
        let episode = Episode::with_setup(scenario, kind, seed, setup.clone())?;
        Ok(Self {
            scenario: scenario.clone(),
            kind,
            seed,
            setup,
            config,
            episode,
            paused: false,
            overridden: Vec::new(),
            log: Vec::new(),
            trace: None,
        })
    }

    /// Streams the trial trace (same format as headless runs) to `w`.
    pub fn record_trace(&mut self, mut w: Box<dyn Write + Send>) -> io::Result<()> {
        write_record(&mut w, &TraceRecord::Header(self.episode.header()))?;
        self.trace = Some(w);
        Ok(())
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn command_log(&self) -> &[LoggedCommand] {
        &self.log
    }

    fn message(&self, body: Body) -> ServerMessage {
        ServerMessage::new(self.episode.time(), self.episode.steps(), body)
    }

    pub fn hello(&self, controlling: bool) -> ServerMessage {
        self.message(Body::Event(Event::Hello {
            controller: self.kind,
            seed: self.seed,
            dt: self.scenario.dt,
            n_traffic: self.scenario.n_traffic,
            friendly: self.setup.friendly,
            merge_end_x: self.setup.merge_end_x,
            yield_max: self.config.yield_max,
            gap_range: self.config.gap_range,
            controlling,
        }))
    }

    /// State, belief and metrics of the current step.
    pub fn snapshot(&self) -> Vec<ServerMessage> {
        let ep = &self.episode;
        let r = ep.result();
        vec![
            self.message(Body::State(ep.state().clone())),
            self.message(Body::Belief(ep.belief_summary())),
            self.message(Body::Metrics(LiveMetrics {
                clearance: ep.cost.clearance(ep.state()),
                min_distance: r.min_distance,
                distance: ep.state().ego.x - self.setup.start.ego.x,
                avg_abs_accel: r.avg_abs_accel,
                cycle_ms: ep.last_cycle_ms(),
            })),
        ]
    }

    fn validate(&self, cmd: &ClientCommand) -> Result<(), String> {
        let n = self.scenario.n_traffic;
        let check_target = |t: usize| if t < n { Ok(()) } else { Err(format!("target {t} out of range for {n} vehicles")) };
        match *cmd {
            ClientCommand::SetYield { target, value } => {
                check_target(target)?;
                if !(0.0..=self.config.yield_max).contains(&value) {
                    return Err(format!("yield {value} outside [0, {}]", self.config.yield_max));
                }
            }
            ClientCommand::SetGapTarget { target, value } => {
                check_target(target)?;
                let [lo, hi] = self.config.gap_range;
                if !(lo..=hi).contains(&value) {
                    return Err(format!("gap {value} outside [{lo}, {hi}]"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Validates and applies a client command before the next step.
    pub fn apply(&mut self, cmd: ClientCommand) -> Result<Vec<ServerMessage>, String> {
        self.validate(&cmd)?;
        self.apply_unchecked(cmd).map_err(|e| e.to_string())
    }

    /// Applies a command without bounds checks; used for replays and for
    /// reverting overrides.
    pub fn apply_unchecked(&mut self, cmd: ClientCommand) -> Result<Vec<ServerMessage>, TrialError> {
        self.log.push(LoggedCommand { step: self.episode.steps(), command: cmd });
        let mut out = vec![self.message(Body::Event(Event::Ack { command: cmd }))];
        match cmd {
            ClientCommand::SetYield { target, value } => {
                self.episode.set_yield(target, value);
                self.overridden.push(target);
            }
            ClientCommand::SetGapTarget { target, value } => {
                self.episode.set_min_gap(target, value);
                self.overridden.push(target);
            }
            ClientCommand::Pause => {
                self.paused = true;
                out.push(self.message(Body::Event(Event::Paused)));
            }
            ClientCommand::Resume => {
                self.paused = false;
                out.push(self.message(Body::Event(Event::Resumed)));
            }
            ClientCommand::Reset => {
                self.episode = Episode::with_setup(&self.scenario, self.kind, self.seed, self.setup.clone())?;
                self.overridden.clear();
                if let Some(w) = self.trace.as_mut() {
                    write_record(w, &TraceRecord::Header(self.episode.header()))?;
                }
                out.push(self.message(Body::Event(Event::Reset)));
                out.extend(self.snapshot());
            }
        }
        Ok(out)
    }

    /// Returns every overridden driver to its ground-truth parameters. The
    /// revert is logged as ordinary commands so replays stay exact.
    pub fn release_overrides(&mut self) -> Vec<ServerMessage> {
        let mut targets = std::mem::take(&mut self.overridden);
        targets.sort_unstable();
        targets.dedup();
        let mut out = Vec::new();
        for t in targets {
            let truth = self.setup.truth[t];
            for cmd in [
                ClientCommand::SetYield { target: t, value: truth.yield_gain },
                ClientCommand::SetGapTarget { target: t, value: truth.min_gap },
            ] {
                out.extend(self.apply_unchecked(cmd).expect("driver overrides cannot fail"));
            }
        }
        self.overridden.clear();
        out
    }

    /// Advances one step unless paused or finished.
    pub fn tick(&mut self) -> io::Result<Vec<ServerMessage>> {
        if self.paused {
            return Ok(Vec::new());
        }
        let Some(rec) = self.episode.step() else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        if rec.events.merge_complete && self.episode.is_done() {
            out.push(self.message(Body::Event(Event::MergeComplete)));
        }
        if rec.events.collision {
            out.push(self.message(Body::Event(Event::Collision)));
        }
        if let Some(w) = self.trace.as_mut() {
            write_record(w, &TraceRecord::Step(rec))?;
        }
        let done = self.episode.is_done();
        if done || self.episode.steps() % self.config.broadcast_every.max(1) == 0 {
            out.extend(self.snapshot());
        }
        if done {
            let result = self.episode.result();
            if let Some(w) = self.trace.as_mut() {
                write_record(w, &TraceRecord::Result(result.clone()))?;
                w.flush()?;
            }
            out.push(self.message(Body::Event(Event::TrialEnd { result })));
        }
        Ok(out)
    }
}

/// Re-runs a session from its command log, writing the trace to `w`.
pub fn replay(
    scenario: &ScenarioConfig,
    kind: ControllerKind,
    seed: u64,
    log: &[LoggedCommand],
    w: Box<dyn Write + Send>,
) -> Result<(), TrialError> {
    let mut s = Session::new(scenario, kind, seed, SessionConfig::default())?;
    s.record_trace(w)?;
    let mut pending = log.iter().peekable();
    loop {
        while let Some(c) = pending.next_if(|c| c.step == s.episode.steps()) {
            s.apply_unchecked(c.command)?;
        }
        // a paused or finished session only moves on through commands, and
        // every command left in the log belongs to a later step
        if s.is_paused() || s.episode.is_done() {
            break;
        }
        s.tick()?;
    }
    Ok(())
}
