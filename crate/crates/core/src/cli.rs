//! `fedsim validate|run|ping|sweep`.
//!
//! Exit codes: 0 success, 1 invalid scenario or arguments, 2 I/O failure,
//! 3 engine failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_yaml::Value;

use crate::engine::{all_pairs, EngineState, Outcome, RequestTrace, RunResult};
use crate::metrics::{self, MetricsStore};
use crate::probes;
use crate::topology::{build_runtime, parse_scenario, validate, FederationSpec, ValidatedTopology};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_ENGINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Discrete-event emulator of a gateway-centralized cluster federation")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a scenario and report every violation.
    Validate(ScenarioArgs),
    /// Run a scenario and export metrics, traces and a summary.
    Run(RunArgs),
    /// Measure RTT between every cluster pair with the workload switched off.
    Ping(PingArgs),
    /// Run one scenario per value of a parameter, in parallel.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Stop the virtual clock here instead of at `duration_s`.
    #[arg(long)]
    pub until: Option<f64>,
    /// Also write every executed event to events.csv.
    #[arg(long)]
    pub event_log: bool,
}

#[derive(Debug, Args)]
pub struct PingArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Seconds between probes of one pair.
    #[arg(long, default_value_t = 0.2)]
    pub interval: f64,
    /// Seconds of probing.
    #[arg(long, default_value_t = 600.0)]
    pub duration: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Dotted path into the scenario, e.g. `workload.phases[0].rate`.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values; each becomes one run in `<out-dir>/<param>=<value>`.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<String>,
}

/// Failure of one command, mapped onto an exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Io(String),
    Engine(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Io(_) => EXIT_IO,
            Failure::Engine(_) => EXIT_ENGINE,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Io(m) | Failure::Engine(m) => m,
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let outcome = match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Run(a) => cmd_run(a),
        Command::Ping(a) => cmd_ping(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn load_spec(text: &str, seed: Option<u64>) -> Result<FederationSpec, Failure> {
    let mut spec = parse_scenario(text).map_err(|e| Failure::Invalid(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn check(spec: &FederationSpec) -> Result<ValidatedTopology, Failure> {
    validate(spec).map_err(|errs| {
        Failure::Invalid(errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"))
    })
}

fn load(args: &ScenarioArgs) -> Result<ValidatedTopology, Failure> {
    check(&load_spec(&read_text(&args.scenario)?, args.seed)?)
}

pub fn cmd_validate(args: &ScenarioArgs) -> Result<(), Failure> {
    let topo = load(args)?;
    println!(
        "{}: ok ({} clusters, {} services, {} timeline actions)",
        args.scenario.display(),
        topo.cluster_count(),
        topo.spec().services.len(),
        topo.timeline().len()
    );
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut io::BufWriter<fs::File>) -> io::Result<()>) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn engine_failure(engine: &EngineState, err: impl std::fmt::Display) -> Failure {
    let mut msg = format!("engine failure at t={}: {err}\nlast events:", engine.now());
    for ev in engine.recent_events() {
        msg.push_str(&format!("\n  {ev}"));
    }
    Failure::Engine(msg)
}

pub fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let topo = load(&args.scenario)?;
    let until = args.until.unwrap_or(topo.spec().duration_s);
    if !(until >= 0.0 && until <= topo.spec().duration_s) {
        return Err(Failure::Invalid(format!("--until {until} must lie in [0, duration_s = {}]", topo.spec().duration_s)));
    }
    create_dir(&args.out_dir)?;
    let started = Instant::now();
    let (engine, result) = execute(&topo, until, args.event_log)?;
    write_run(&args.out_dir, &topo, &engine, &result, until)?;
    println!(
        "{} events, {} requests in {:.2} s wall time -> {}",
        result.event_count,
        result.traces.len(),
        started.elapsed().as_secs_f64(),
        args.out_dir.display()
    );
    Ok(())
}

fn execute(topo: &ValidatedTopology, until: f64, event_log: bool) -> Result<(EngineState, RunResult), Failure> {
    let mut engine = build_runtime(topo);
    if event_log {
        engine.enable_event_log();
    }
    match engine.run(until) {
        Ok(r) => Ok((engine, r)),
        Err(e) => Err(engine_failure(&engine, e)),
    }
}

/// Files written by `run`, in the order listed in the summary.
pub const RUN_FILES: [&str; 7] = [
    "summary.yaml",
    "replica_busy_vcpu_seconds_total.csv",
    "endpoint_outstanding_requests.csv",
    "cpu_rate.csv",
    "cluster_cpu_rate.csv",
    "probe_rtt.csv",
    "traces.csv",
];

fn derived_rates(store: &MetricsStore, window: f64) -> (MetricsStore, MetricsStore) {
    match metrics::cpu_rate(store, window).and_then(|r| metrics::aggregate_by_cluster(&r).map(|a| (r, a))) {
        Ok(pair) => pair,
        Err(e) => {
            log::warn!("no CPU rates: {e}");
            (MetricsStore::new(), MetricsStore::new())
        }
    }
}

fn cluster_names(topo: &ValidatedTopology) -> Vec<&str> {
    (0..topo.cluster_count()).map(|c| topo.cluster_name(c)).collect()
}

fn write_run(
    dir: &Path,
    topo: &ValidatedTopology,
    engine: &EngineState,
    result: &RunResult,
    until: f64,
) -> Result<(), Failure> {
    let (rates, cluster_rates) = derived_rates(&result.metrics, topo.spec().engine.rate_window_s);
    let csv = |name: &str, store: &MetricsStore| {
        write_file(&dir.join(format!("{name}.csv")), |w| store.write_csv(name, w))
    };
    csv(metrics::BUSY_SECONDS, &result.metrics)?;
    csv(metrics::OUTSTANDING, &result.metrics)?;
    csv(metrics::CPU_RATE, &rates)?;
    csv(metrics::CLUSTER_CPU_RATE, &cluster_rates)?;
    let names = cluster_names(topo);
    write_file(&dir.join("probe_rtt.csv"), |w| probes::write_probe_csv(&result.probes, &names, w))?;
    write_file(&dir.join("traces.csv"), |w| write_traces_csv(topo, &result.traces, w))?;
    if let Some(log) = engine.event_log() {
        write_file(&dir.join("events.csv"), |w| {
            writeln!(w, "time_s,seq,kind")?;
            for ev in log {
                writeln!(w, "{},{},{}", ev.time, ev.seq, ev.kind.name())?;
            }
            Ok(())
        })?;
    }
    let summary = Summary::new(topo, engine, result, &cluster_rates, until);
    let text = serde_yaml::to_string(&summary).expect("summary serializes");
    write_file(&dir.join("summary.yaml"), |w| w.write_all(text.as_bytes()))
}

/// Per-request CSV; empty cells for timestamps never reached.
pub fn write_traces_csv<W: Write>(topo: &ValidatedTopology, traces: &[RequestTrace], mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "id,ingress_in,fe_start,fe_end,be_dispatch,be_start,be_end,response_out,payload_bytes,reduced_bytes,\
         frontend_cluster,frontend_replica,backend_cluster,backend_replica,outcome"
    )?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let ep = |k: Option<crate::mesh::EndpointKey>| match k {
        Some(k) => (topo.cluster_name(k.cluster).to_string(), k.replica.to_string()),
        None => (String::new(), String::new()),
    };
    for t in traces {
        let (fc, fr) = ep(t.frontend);
        let (bc, br) = ep(t.backend);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{fc},{fr},{bc},{br},{}",
            t.id,
            t.ingress_in,
            opt(t.fe_start),
            opt(t.fe_end),
            opt(t.be_dispatch),
            opt(t.be_start),
            opt(t.be_end),
            opt(t.response_out),
            t.payload_bytes,
            t.reduced_bytes,
            t.outcome
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct LatencySummary {
    mean_s: f64,
    p50_s: f64,
    p99_s: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    seed: u64,
    until_s: f64,
    events: u64,
    requests: BTreeMap<String, u64>,
    completed_by_frontend_cluster: BTreeMap<String, u64>,
    completed_by_backend_cluster: BTreeMap<String, u64>,
    busy_vcpu_seconds_by_cluster: BTreeMap<String, f64>,
    mean_cluster_cpu_rate: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latency: Option<LatencySummary>,
    probes_sent: usize,
    files: Vec<String>,
}

impl Summary {
    fn new(
        topo: &ValidatedTopology,
        engine: &EngineState,
        result: &RunResult,
        cluster_rates: &MetricsStore,
        until: f64,
    ) -> Self {
        let mut requests: BTreeMap<String, u64> = BTreeMap::new();
        requests.insert("total".into(), result.traces.len() as u64);
        let mut by_fe = BTreeMap::new();
        let mut by_be = BTreeMap::new();
        let mut latencies = Vec::new();
        for t in &result.traces {
            *requests.entry(t.outcome.to_string()).or_insert(0) += 1;
            if t.outcome == Outcome::Completed {
                if let Some(k) = t.frontend {
                    *by_fe.entry(topo.cluster_name(k.cluster).to_string()).or_insert(0) += 1;
                }
                if let Some(k) = t.backend {
                    *by_be.entry(topo.cluster_name(k.cluster).to_string()).or_insert(0) += 1;
                }
                latencies.extend(t.latency());
            }
        }
        let latency = (!latencies.is_empty()).then(|| {
            latencies.sort_by(f64::total_cmp);
            let q = |p: f64| latencies[((latencies.len() - 1) as f64 * p).round() as usize];
            LatencySummary { mean_s: latencies.iter().sum::<f64>() / latencies.len() as f64, p50_s: q(0.5), p99_s: q(0.99) }
        });
        let mut busy = BTreeMap::new();
        for r in engine.replicas() {
            *busy.entry(topo.cluster_name(r.key.cluster).to_string()).or_insert(0.0) += r.busy_vcpu_seconds;
        }
        let mean_cluster_cpu_rate = cluster_rates
            .series(metrics::CLUSTER_CPU_RATE)
            .filter_map(|(l, s)| {
                metrics::window_mean(s, f64::NEG_INFINITY, f64::INFINITY).map(|m| (format!("{}/{}", l.cluster, l.service), m))
            })
            .collect();
        Summary {
            seed: topo.spec().seed,
            until_s: until,
            events: result.event_count,
            requests,
            completed_by_frontend_cluster: by_fe,
            completed_by_backend_cluster: by_be,
            busy_vcpu_seconds_by_cluster: busy,
            mean_cluster_cpu_rate,
            latency,
            probes_sent: result.probes.len(),
            files: RUN_FILES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn cmd_ping(args: &PingArgs) -> Result<(), Failure> {
    if !(args.interval > 0.0 && args.interval.is_finite()) {
        return Err(Failure::Invalid(format!("--interval {} must be > 0", args.interval)));
    }
    if !(args.duration > 0.0 && args.duration.is_finite()) {
        return Err(Failure::Invalid(format!("--duration {} must be > 0", args.duration)));
    }
    let mut spec = load_spec(&read_text(&args.scenario.scenario)?, args.scenario.seed)?;
    // The ping experiment sets its own horizon: probing plus one timeout.
    spec.duration_s = spec.duration_s.max(args.duration + spec.engine.timeout_s);
    let topo = check(&spec)?;
    create_dir(&args.out_dir)?;
    let n = topo.cluster_count();
    let engine = build_runtime(&topo);
    let samples = probes::run_ping(engine, all_pairs(n), args.interval, args.duration)
        .map_err(|e| Failure::Engine(format!("engine failure: {e}")))?;
    let names = cluster_names(&topo);
    write_file(&args.out_dir.join("probe_rtt.csv"), |w| probes::write_probe_csv(&samples, &names, w))?;
    let stats = probes::rtt_stats(&samples, n);
    let mut text = probes::format_matrix(&stats, &names);
    text.push_str("\nvariance [ms^2] / loss fraction\n");
    for (i, row) in stats.iter().enumerate() {
        text.push_str(names[i]);
        for s in row {
            match s.variance {
                Some(v) => text.push_str(&format!("\t{v:.4}/{:.3}", s.loss_fraction)),
                None => text.push_str(&format!("\t-/{:.3}", s.loss_fraction)),
            }
        }
        text.push('\n');
    }
    write_file(&args.out_dir.join("rtt_matrix.txt"), |w| w.write_all(text.as_bytes()))?;
    print!("{text}");
    Ok(())
}

/// One step of a parameter path.
#[derive(Debug, Clone, PartialEq)]
enum PathStep {
    Key(String),
    Index(usize),
}

fn parse_path(path: &str) -> Option<Vec<PathStep>> {
    let mut steps = Vec::new();
    for part in path.split('.') {
        let (key, mut rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if key.is_empty() {
            return None;
        }
        steps.push(PathStep::Key(key.to_string()));
        while !rest.is_empty() {
            let close = rest.find(']')?;
            steps.push(PathStep::Index(rest.get(1..close)?.parse().ok()?));
            rest = &rest[close + 1..];
            if !rest.is_empty() && !rest.starts_with('[') {
                return None;
            }
        }
    }
    Some(steps)
}

/// Replace the value at `path` in a scenario tree. The path must already
/// exist, so a typo cannot silently add an ignored field.
pub fn set_param(doc: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let unknown = || format!("unknown parameter path {path:?}");
    let steps = parse_path(path).ok_or_else(unknown)?;
    let mut cur = doc;
    for step in &steps {
        cur = match step {
            PathStep::Key(k) => cur.as_mapping_mut().and_then(|m| m.get_mut(k.as_str())).ok_or_else(unknown)?,
            PathStep::Index(i) => cur.as_sequence_mut().and_then(|s| s.get_mut(*i)).ok_or_else(unknown)?,
        };
    }
    *cur = value;
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let text = read_text(&args.scenario.scenario)?;
    let doc: Value = serde_yaml::from_str(&text).map_err(|e| Failure::Invalid(e.to_string()))?;
    let values: Vec<&str> = args.values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();

    let mut jobs = Vec::new();
    for raw in &values {
        let mut d = doc.clone();
        let value: Value = serde_yaml::from_str(raw).map_err(|e| Failure::Invalid(format!("value {raw:?}: {e}")))?;
        set_param(&mut d, &args.param, value).map_err(Failure::Invalid)?;
        let rendered = serde_yaml::to_string(&d).expect("yaml value serializes");
        let topo = check(&load_spec(&rendered, args.scenario.seed)?)?;
        jobs.push((args.out_dir.join(format!("{}={raw}", args.param)), topo));
    }
    if jobs.is_empty() {
        println!("no values given; nothing to run");
        return Ok(());
    }

    let results: Vec<Result<(), Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(dir, topo)| {
                s.spawn(move || {
                    create_dir(dir)?;
                    let until = topo.spec().duration_s;
                    let (engine, result) = execute(topo, until, false)?;
                    write_run(dir, topo, &engine, &result, until)?;
                    println!("{}: {} requests", dir.display(), result.traces.len());
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Failure::Engine("sweep worker panicked".into())))).collect()
    });
    // Report the most severe failure.
    results.into_iter().filter_map(Result::err).max_by_key(Failure::exit_code).map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_parsing() {
        assert_eq!(
            parse_path("workload.phases[0].rate").unwrap(),
            vec![
                PathStep::Key("workload".into()),
                PathStep::Key("phases".into()),
                PathStep::Index(0),
                PathStep::Key("rate".into())
            ]
        );
        assert_eq!(
            parse_path("links.one_way_delay_ms[0][2]").unwrap()[2..],
            [PathStep::Index(0), PathStep::Index(2)]
        );
        for bad in ["", "a..b", "a[x]", "a[1", "a[1]b"] {
            assert!(parse_path(bad).is_none(), "{bad}");
        }
    }

    #[test]
    fn set_param_requires_existing_path() {
        let mut doc: Value = serde_yaml::from_str("workload: {phases: [{rate: 10, duration_s: 5}]}").unwrap();
        set_param(&mut doc, "workload.phases[0].rate", Value::from(20)).unwrap();
        assert_eq!(doc["workload"]["phases"][0]["rate"], Value::from(20));
        let err = set_param(&mut doc, "workload.phases[3].rate", Value::from(1)).unwrap_err();
        assert!(err.contains("workload.phases[3].rate"));
        assert!(set_param(&mut doc, "workload.colour", Value::from(1)).is_err());
    }
}
