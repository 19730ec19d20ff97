//! End-to-end acceptance checks, one line per criterion.
//!
//! Run with `cargo test --test acceptance` (or `--release` for speed). Every
//! check prints `criterion N: PASS|FAIL ...`; the binary exits non-zero if
//! any check fails.

mod common;

use std::fs;
use std::path::Path;

use common::*;
use fedsim::engine::{all_pairs, Outcome};
use fedsim::mesh::Policy;
use fedsim::metrics;
use fedsim::netem::{sample_delay, sample_loss, ImpairmentRule, JitterDist, JitterSpec, LossSpec, LossState, Site, TrafficClass};
use fedsim::probes::{rtt_stats, run_ping, RttStats};
use fedsim::rng::{stream, StreamId};
use fedsim::topology::FederationSpec;
use fedsim::workload::{ArrivalKind, Phase};

// Pinned tolerances.
const RTT_EXACT_TOL_MS: f64 = 1e-9;
const RTT_REFERENCE_RAW_TOL_MS: f64 = 0.5;
const RTT_REFERENCE_CALIBRATED_TOL_MS: f64 = 1.0;
const CALIBRATED_BASE_MS: f64 = 0.85;
const RTT_JITTER_REL_TOL: f64 = 0.02;
const DOUBLING_REL_TOL: f64 = 0.05;
const RR_RATE_REL_TOL: f64 = 0.05;
const LC_NO_DELAY_REL_TOL: f64 = 0.05;
const BLACKOUT_ZERO_CORES: f64 = 0.01;
const BLACKOUT_DOUBLING_REL_TOL: f64 = 0.10;
const LITTLE_REL_TOL: f64 = 0.10;

/// Measured mean-RTT matrix reported for the four-cluster testbed, ms.
const REFERENCE_RTT: [[f64; 4]; 4] = [
    [0.05, 1.48, 51.7, 1.56],
    [1.46, 0.04, 51.8, 1.46],
    [51.7, 51.8, 0.05, 1.59],
    [1.47, 1.45, 1.58, 0.03],
];

type Check = Result<String, String>;

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn ping_matrix(spec: &FederationSpec) -> Vec<Vec<RttStats>> {
    let n = spec.clusters.len();
    let samples = run_ping(engine(spec), all_pairs(n), 0.2, 600.0).unwrap();
    rtt_stats(&samples, n)
}

/// Analytic zero-jitter RTT: both one-way delays plus two base hops.
fn analytic_rtt(spec: &FederationSpec, i: usize, j: usize) -> f64 {
    if i == j {
        return 2.0 * spec.links.intra_delay_ms;
    }
    let d = &spec.links.one_way_delay_ms;
    d[i][j] + d[j][i] + 2.0 * spec.links.base_delay_ms
}

fn criterion_1() -> Check {
    let base = spec(&scenario_text("ping.scenario"));
    let n = base.clusters.len();
    let m = ping_matrix(&base);
    for i in 0..n {
        for j in 0..n {
            let s = m[i][j];
            ensure(s.sent == 3000 && s.received == 3000, format!("pair ({i},{j}) sent {} received {}", s.sent, s.received))?;
            let want = analytic_rtt(&base, i, j);
            let got = s.mean.unwrap();
            ensure((got - want).abs() <= RTT_EXACT_TOL_MS, format!("mean RTT ({i},{j}) {got} != {want}"))?;
            ensure(s.variance == Some(0.0), format!("variance ({i},{j}) = {:?}", s.variance))?;
        }
    }
    let c13 = m[0][2].mean.unwrap();
    ensure((c13 - 51.46).abs() <= RTT_EXACT_TOL_MS, format!("RTT(C1,C3) {c13}"))?;
    ensure((m[0][3].mean.unwrap() - 1.46).abs() <= RTT_EXACT_TOL_MS, "RTT(C1,C4) != 1.46".into())?;
    for (i, j) in [(0, 2), (1, 2), (2, 0), (2, 1)] {
        let dev = (m[i][j].mean.unwrap() - REFERENCE_RTT[i][j]).abs();
        ensure(dev <= RTT_REFERENCE_RAW_TOL_MS, format!("({i},{j}) differs from measured by {dev:.3} ms"))?;
    }

    let mut calibrated = base.clone();
    calibrated.links.base_delay_ms = CALIBRATED_BASE_MS;
    let mc = ping_matrix(&calibrated);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((mc[i][j].mean.unwrap() - REFERENCE_RTT[i][j]).abs());
        }
    }
    ensure(worst <= RTT_REFERENCE_CALIBRATED_TOL_MS, format!("calibrated matrix off by {worst:.3} ms"))?;

    let mut jittered = base.clone();
    let jit = JitterSpec { dist: JitterDist::Normal, scale_ms: 0.1 };
    for i in 0..n {
        for j in 0..n {
            if i != j {
                jittered.links.jitter[i][j] = jit;
            }
        }
    }
    let mj = ping_matrix(&jittered);
    let mut worst_rel = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = &jittered.links.one_way_delay_ms;
            let want = clamped_normal_mean(d[i][j], 0.1) + clamped_normal_mean(d[j][i], 0.1) + 2.0 * jittered.links.base_delay_ms;
            let got = mj[i][j].mean.unwrap();
            worst_rel = worst_rel.max((got - want).abs() / want);
        }
    }
    ensure(worst_rel <= RTT_JITTER_REL_TOL, format!("jittered mean off by {:.2}%", worst_rel * 100.0))?;
    Ok(format!(
        "RTT(C1,C3)={c13:.2} ms exact, variance 0; calibrated max dev {worst:.3} ms; jitter 0.1 ms max rel err {:.3}%",
        worst_rel * 100.0
    ))
}

/// Steady-state windows: last 400 s of each 600 s phase.
const PHASE1: (f64, f64) = (200.0, 600.0);
const PHASE2: (f64, f64) = (800.0, 1200.0);

fn poc_rates() -> (FederationSpec, fedsim::engine::RunResult, metrics::MetricsStore) {
    let s = spec(&scenario_text("poc.scenario"));
    let r = run_full(&s);
    let rates = cluster_rates(&r, s.engine.rate_window_s);
    (s, r, rates)
}

fn criterion_2(rates: &metrics::MetricsStore) -> Check {
    let mut parts = Vec::new();
    for c in ["C1", "C2", "C3", "C4"] {
        let lo = mean_rate(rates, c, PHASE1.0, PHASE1.1);
        let hi = mean_rate(rates, c, PHASE2.0, PHASE2.1);
        let ratio = hi / lo;
        ensure((ratio - 2.0).abs() / 2.0 <= DOUBLING_REL_TOL, format!("{c}: {hi:.4}/{lo:.4} = {ratio:.4}"))?;
        parts.push(format!("{c} x{ratio:.3}"));
    }
    Ok(parts.join(", "))
}

fn criterion_3(rates: &metrics::MetricsStore) -> Check {
    let mut parts = Vec::new();
    for (name, (a, b)) in [("10 img/s", PHASE1), ("20 img/s", PHASE2)] {
        let fe = mean_rate(rates, "C1", a, b) + mean_rate(rates, "C2", a, b);
        let be = mean_rate(rates, "C3", a, b) + mean_rate(rates, "C4", a, b);
        ensure(fe < be, format!("{name}: frontend {fe:.4} >= backend {be:.4}"))?;
        parts.push(format!("{name}: FE {fe:.3} < BE {be:.3} cores"));
    }
    Ok(parts.join("; "))
}

fn criterion_4(s: &FederationSpec, r: &fedsim::engine::RunResult, rates: &metrics::MetricsStore) -> Check {
    ensure(s.services[0].backend_policy == Policy::RoundRobin, "bundled PoC is not RR".into())?;
    let c = backend_completions(&r.traces, 4);
    let diff = c[2].abs_diff(c[3]);
    ensure(diff <= 1, format!("completions C3 {} vs C4 {}", c[2], c[3]))?;
    let mut worst = 0.0f64;
    for (a, b) in [PHASE1, PHASE2] {
        worst = worst.max(rel_diff(mean_rate(rates, "C3", a, b), mean_rate(rates, "C4", a, b)));
    }
    ensure(worst < RR_RATE_REL_TOL, format!("C3/C4 rate differ by {:.2}%", worst * 100.0))?;
    Ok(format!("completions C3={} C4={}; max rate diff {:.2}%", c[2], c[3], worst * 100.0))
}

/// LC variant of the PoC at 20 img/s for 600 s with Poisson arrivals.
fn lc_spec(delay: bool) -> FederationSpec {
    let mut s = spec(&scenario_text("poc.scenario"));
    s.services[0].backend_policy = Policy::LeastConnection;
    s.workload.arrival = ArrivalKind::Poisson;
    s.workload.phases = vec![Phase { rate: 20.0, duration_s: 600.0 }];
    s.duration_s = 610.0;
    if !delay {
        for row in &mut s.links.one_way_delay_ms {
            row.iter_mut().for_each(|d| *d = 0.0);
        }
    }
    s
}

fn criterion_5() -> Check {
    let with = backend_completions(&run_full(&lc_spec(true)).traces, 4);
    ensure(with[3] > with[2], format!("with delay: C4 {} <= C3 {}", with[3], with[2]))?;
    let without = backend_completions(&run_full(&lc_spec(false)).traces, 4);
    let rd = rel_diff(without[2] as f64, without[3] as f64);
    ensure(rd <= LC_NO_DELAY_REL_TOL, format!("no delay: C3 {} vs C4 {}", without[2], without[3]))?;
    Ok(format!(
        "Poisson 20 img/s: delay C4={} > C3={}; no delay C3={} C4={} ({:.2}%)",
        with[3],
        with[2],
        without[2],
        without[3],
        rd * 100.0
    ))
}

fn criterion_6() -> Check {
    let s = spec(&scenario_text("blackout.scenario"));
    let r = run_full(&s);
    let w = s.engine.rate_window_s;
    let rates = cluster_rates(&r, w);
    let c3 = cluster_series(&rates, "C3");
    let mut parts = Vec::new();
    for (onset, end, pre_from) in [(300.0, 600.0, w), (900.0, 1200.0, 600.0 + w)] {
        let first_zero = c3
            .iter()
            .find(|&&(t, v)| t >= onset && v < BLACKOUT_ZERO_CORES)
            .map(|&(t, _)| t)
            .ok_or(format!("C3 never below {BLACKOUT_ZERO_CORES} after {onset}"))?;
        ensure(first_zero <= onset + w, format!("C3 reached zero at {first_zero}, onset {onset}"))?;
        let stays = c3.iter().filter(|&&(t, _)| t >= onset + w && t < end).all(|&(_, v)| v < BLACKOUT_ZERO_CORES);
        ensure(stays, format!("C3 rate rises during blackout [{onset}, {end})"))?;
        let pre = mean_rate(&rates, "C4", pre_from, onset);
        let during = mean_rate(&rates, "C4", onset + w, end);
        let ratio = during / pre;
        ensure((ratio - 2.0).abs() / 2.0 <= BLACKOUT_DOUBLING_REL_TOL, format!("C4 x{ratio:.3} in [{onset}, {end})"))?;
        parts.push(format!("onset {onset}: C3<{BLACKOUT_ZERO_CORES} by t={first_zero}, C4 x{ratio:.3}"));
    }
    let interval = s.engine.scrape_interval_s;
    let expected = (s.duration_s / interval).round() as usize;
    let c3_series = r.metrics.find(metrics::BUSY_SECONDS, |l| l.cluster == "C3");
    ensure(!c3_series.is_empty(), "no C3 busy series".into())?;
    for (l, samples) in &c3_series {
        ensure(samples.len() == expected, format!("{l}: {} samples, expected {expected}", samples.len()))?;
        for (k, &(t, _)) in samples.iter().enumerate() {
            ensure((t - k as f64 * interval).abs() < 1e-9, format!("{l}: sample {k} at {t}"))?;
        }
    }
    parts.push(format!("C3 scraped at all {expected} scrapes"));
    Ok(parts.join("; "))
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_7() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for (name, seed) in [("poc.scenario", None), ("blackout.scenario", None), ("poc.scenario", Some("7"))] {
        let mut dirs = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("{name}-{seed:?}-{rep}"));
            let mut args = vec![
                "fedsim".to_string(),
                "run".into(),
                "--scenario".into(),
                scenario_path(name).to_string_lossy().into_owned(),
                "--out-dir".into(),
                dir.to_string_lossy().into_owned(),
            ];
            if let Some(s) = seed {
                args.extend(["--seed".to_string(), s.to_string()]);
            }
            let code = fedsim::cli::run(args);
            ensure(code == 0, format!("{name} run exited {code}"))?;
            dirs.push(read_dir_bytes(&dir));
        }
        ensure(dirs[0].len() >= 7, format!("{name}: only {} files", dirs[0].len()))?;
        ensure(dirs[0] == dirs[1], format!("{name} (seed {seed:?}): outputs differ between runs"))?;
        compared += dirs[0].len();
    }
    Ok(format!("{compared} files byte-identical across repeated runs"))
}

const UTILIZATION: &str = "\
seed: 5
duration_s: 600
clusters:
  - {name: C1, nodes: 4, vcpus_per_node: 4, role: edge}
  - {name: C2, nodes: 4, vcpus_per_node: 4, role: edge}
  - {name: C3, nodes: 4, vcpus_per_node: 4}
  - {name: C4, nodes: 4, vcpus_per_node: 4}
services:
  - {name: frontend, stage: frontend, replicas_per_cluster: {C1: 2, C2: 2}}
  - {name: backend, stage: backend, replicas_per_cluster: {C3: 3, C4: 3}}
workload:
  arrival: constant
  phases: [{rate: 10, duration_s: 600}]
  payload: {dist: constant, bytes: 300000}
";

fn criterion_8() -> Check {
    let s = spec(UTILIZATION);
    let r = run_full(&s);
    let w = s.engine.rate_window_s;
    let rates = cluster_rates(&r, w);
    // Independent oracle: 300 kB, frontend 20 ms + 0.01 ms/kB, backend
    // 80 ms + 0.02 ms/kB on a third of the bytes; 10 img/s split evenly
    // over two clusters per stage.
    let d_fe = (20.0 + 0.01 * 300.0) / 1e3;
    let d_be = (80.0 + 0.02 * 100.0) / 1e3;
    let lambda = 5.0;
    let mut worst = 0.0f64;
    for (c, d) in [("C1", d_fe), ("C2", d_fe), ("C3", d_be), ("C4", d_be)] {
        let want = lambda * d;
        for &(t, v) in cluster_series(&rates, c) {
            if t >= w && t < 600.0 {
                let err = (v - want).abs();
                ensure(err <= d / w + 1e-9, format!("{c} at t={t}: {v} vs {want}"))?;
                worst = worst.max(err / (d / w));
            }
        }
    }
    let (from, to) = (120.0, 600.0);
    let in_window: Vec<_> =
        r.traces.iter().filter(|t| t.ingress_in >= from && t.ingress_in < to && t.outcome == Outcome::Completed).collect();
    let lambda_all = in_window.len() as f64 / (to - from);
    let mean_w = in_window.iter().map(|t| t.latency().unwrap()).sum::<f64>() / in_window.len() as f64;
    let l = mean_in_system(&r.traces, from, to);
    let little = (l - lambda_all * mean_w).abs() / l;
    ensure(little <= LITTLE_REL_TOL, format!("L={l:.4} vs lambda*W={:.4}", lambda_all * mean_w))?;
    Ok(format!(
        "rates within {:.2} request-per-window of lambda*d; Little L={l:.4} lambda*W={:.4} ({:.3}%)",
        worst,
        lambda_all * mean_w,
        little * 100.0
    ))
}

fn criterion_9() -> Check {
    const N: usize = 100_000;
    let rule = |delay_ms: f64, jitter: JitterSpec, loss: LossSpec| ImpairmentRule {
        delay_ms,
        jitter,
        loss,
        ..ImpairmentRule::unimpaired(Site::Cluster(0), Site::Cluster(2), TrafficClass::Data)
    };
    let draw = |r: &ImpairmentRule, seed: u64| {
        let mut rng = stream(seed, StreamId::LinkDelay(Site::Cluster(0), Site::Cluster(2)));
        (0..N).map(|_| sample_delay(r, &mut rng)).collect::<Vec<f64>>()
    };
    let moments = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        (m, v.sqrt())
    };

    let exact = draw(&rule(25.0, JitterSpec::NONE, LossSpec::NONE), 1);
    ensure(exact.iter().all(|&x| x == 25.0), "constant delay not exact".into())?;

    let (m, sd) = moments(&draw(&rule(25.0, JitterSpec { dist: JitterDist::Normal, scale_ms: 5.0 }, LossSpec::NONE), 2));
    ensure((m - 25.0).abs() / 25.0 <= 0.01, format!("normal mean {m}"))?;
    ensure((sd - 5.0).abs() / 5.0 <= 0.05, format!("normal std {sd}"))?;

    let clamped = draw(&rule(1.0, JitterSpec { dist: JitterDist::Normal, scale_ms: 10.0 }, LossSpec::NONE), 3);
    let (mc, _) = moments(&clamped);
    ensure(clamped.iter().all(|&x| x >= 0.0) && mc > 1.0, format!("clamped mean {mc}"))?;
    let oracle = clamped_normal_mean(1.0, 10.0);
    ensure((mc - oracle).abs() / oracle <= 0.02, format!("clamped mean {mc} vs oracle {oracle}"))?;

    let uni = draw(&rule(25.0, JitterSpec { dist: JitterDist::Uniform, scale_ms: 5.0 }, LossSpec::NONE), 4);
    let (mu, su) = moments(&uni);
    ensure(uni.iter().all(|&x| (20.0..=30.0).contains(&x)), "uniform out of band".into())?;
    ensure((mu - 25.0).abs() / 25.0 <= 0.01, format!("uniform mean {mu}"))?;
    let su_want = 5.0 / 3f64.sqrt();
    ensure((su - su_want).abs() / su_want <= 0.05, format!("uniform std {su}"))?;

    let losses = |p: f64, seed: u64| {
        let r = rule(0.0, JitterSpec::NONE, LossSpec { p, correlation: 0.0 });
        let mut rng = stream(seed, StreamId::LinkLoss(Site::Cluster(0), Site::Cluster(2)));
        let mut st = LossState::default();
        (0..N).filter(|_| sample_loss(&r, &mut rng, &mut st)).count()
    };
    ensure(losses(0.0, 5) == 0 && losses(1.0, 6) == N, "loss extremes".into())?;
    let lost = losses(0.1, 7);
    let rate = lost as f64 / N as f64;
    ensure((0.094..=0.106).contains(&rate), format!("loss rate {rate}"))?;
    let (e1, e0) = (N as f64 * 0.1, N as f64 * 0.9);
    let chi2 = (lost as f64 - e1).powi(2) / e1 + ((N - lost) as f64 - e0).powi(2) / e0;
    ensure(chi2 < 3.841, format!("chi2 {chi2}"))?;
    Ok(format!(
        "normal mean {m:.3} sd {sd:.3}; clamped {mc:.3} (oracle {oracle:.3}); uniform {mu:.3}/{su:.3}; loss {rate:.4} chi2 {chi2:.2}"
    ))
}

fn main() {
    let (poc_spec, poc_run, poc_rates) = poc_rates();
    let results: Vec<(u32, Check)> = vec![
        (1, criterion_1()),
        (2, criterion_2(&poc_rates)),
        (3, criterion_3(&poc_rates)),
        (4, criterion_4(&poc_spec, &poc_run, &poc_rates)),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7()),
        (8, criterion_8()),
        (9, criterion_9()),
    ];
    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n}: PASS  {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL  {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
