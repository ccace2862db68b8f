use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dmpd_core::controller::ControllerKind;
use dmpd_core::scenario::metrics::{write_metrics_csv, write_timeseries_csv, write_trials_csv};
use dmpd_core::scenario::trace::{read_trace, TraceRecord};
use dmpd_core::scenario::{run_batch, run_trial, summarize, trace_file_name, ScenarioConfig};
use dmpd_sim::{ServeOptions, Session, SessionConfig};

#[derive(Parser)]
#[command(name = "dmpd", version, about = "Dual model predictive diffusion for interactive highway merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial and write its trace and time series.
    Run(RunArgs),
    /// Run seeded trials for one or more controllers and write the metrics table.
    Batch(BatchArgs),
    /// Serve one trial over a websocket at wall-clock rate.
    Serve(ServeArgs),
    /// Print the default scenario config.
    Config,
    /// Convert a trace file to a per-step CSV time series.
    Timeseries {
        trace: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario config (TOML). Defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        match &self.config {
            Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(ScenarioConfig::default()),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "dmpd")]
    controller: ControllerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct BatchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated controllers.
    #[arg(long, value_delimiter = ',', default_value = "dmpd,dmppi,emppi")]
    controllers: Vec<ControllerKind>,
    #[arg(long, default_value_t = 24)]
    trials: u64,
    /// First seed; trial k uses `seed + k` for every controller.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Skip the per-trial trace files.
    #[arg(long)]
    no_traces: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "dmpd")]
    controller: ControllerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    realtime_factor: f64,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "/ws")]
    path: String,
    /// Directory served at `/` (the cockpit bundle).
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Record the trace of the served trial here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Batch(a) => batch(a),
        Command::Serve(a) => serve(a),
        Command::Config => {
            print!("{}", ScenarioConfig::default().to_toml_string());
            Ok(())
        }
        Command::Timeseries { trace, out } => {
            let out = out.unwrap_or_else(|| trace.with_extension("csv"));
            timeseries(&trace, &out)
        }
    }
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = a.common.load()?;
    fs::create_dir_all(&a.out)?;
    let trace = a.out.join(trace_file_name(a.controller, a.seed));
    let mut w = BufWriter::new(File::create(&trace)?);
    let result = run_trial(&cfg, a.controller, a.seed, Some(&mut w))?;
    drop(w);
    timeseries(&trace, &trace.with_extension("csv"))?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn batch(a: BatchArgs) -> Result<()> {
    let cfg = a.common.load()?;
    fs::create_dir_all(&a.out)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.trials).collect();
    let trace_dir = (!a.no_traces).then_some(a.out.as_path());
    let mut summaries = Vec::new();
    let mut all = Vec::new();
    for &kind in &a.controllers {
        let results = run_batch(&cfg, kind, &seeds, trace_dir, |r| {
            eprintln!("{} seed {}: {:?} merge {:.2} m", kind.label(), r.seed, r.outcome, r.merge_distance);
        })?;
        let s = summarize(kind, &results);
        eprintln!(
            "{}: success {:.0}%  merge {:.2} m  min dist {:.3} m  |a| {:.3}  cycle {:.1} ms",
            s.controller, s.success_rate, s.mean_merge_distance, s.mean_min_distance, s.mean_abs_accel, s.median_cycle_ms
        );
        summaries.push(s);
        all.extend(results);
    }
    write_metrics_csv(File::create(a.out.join("metrics.csv"))?, &summaries)?;
    write_trials_csv(File::create(a.out.join("trials.csv"))?, &all)?;
    write_metrics_csv(std::io::stdout().lock(), &summaries)?;
    Ok(())
}

fn timeseries(trace: &Path, out: &Path) -> Result<()> {
    let records = read_trace(BufReader::new(File::open(trace)?))?;
    let steps: Vec<_> = records
        .into_iter()
        .filter_map(|r| match r {
            TraceRecord::Step(s) => Some(s),
            _ => None,
        })
        .collect();
    write_timeseries_csv(File::create(out)?, &steps)?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let mut session = Session::new(&cfg, a.controller, a.seed, SessionConfig::default())?;
    if let Some(p) = &a.trace {
        let w: Box<dyn Write + Send> = Box::new(BufWriter::new(File::create(p)?));
        session.record_trace(w)?;
    }
    if a.static_dir.as_ref().is_some_and(|d| !d.is_dir()) {
        bail!("static dir {} does not exist", a.static_dir.unwrap().display());
    }
    let path = a.path.clone();
    let opts = ServeOptions {
        host: a.host,
        port: a.port,
        path: a.path,
        realtime_factor: a.realtime_factor,
        static_dir: a.static_dir,
    };
    tokio::runtime::Runtime::new()?.block_on(async move {
        let handle = dmpd_sim::start(session, opts).await?;
        eprintln!("listening on ws://{}{path}", handle.addr);
        tokio::signal::ctrl_c().await?;
        handle.shutdown().await?;
        anyhow::Ok(())
    })
}
