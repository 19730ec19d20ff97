#![allow(dead_code)]

use std::path::PathBuf;

use fedsim::engine::{EngineState, Outcome, RequestTrace, RunResult};
use fedsim::metrics::{self, MetricsStore};
use fedsim::topology::{build_runtime, parse_scenario, validate, FederationSpec, ValidatedTopology};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn scenario_text(name: &str) -> String {
    std::fs::read_to_string(scenario_path(name)).unwrap()
}

pub fn spec(doc: &str) -> FederationSpec {
    parse_scenario(doc).unwrap()
}

pub fn topo(spec: &FederationSpec) -> ValidatedTopology {
    validate(spec).unwrap_or_else(|e| panic!("{e:?}"))
}

pub fn engine(spec: &FederationSpec) -> EngineState {
    build_runtime(&topo(spec))
}

pub fn run_full(spec: &FederationSpec) -> RunResult {
    engine(spec).run(spec.duration_s).unwrap()
}

/// Per-cluster aggregate CPU rate series, keyed by cluster name.
pub fn cluster_rates(result: &RunResult, window: f64) -> MetricsStore {
    metrics::aggregate_by_cluster(&metrics::cpu_rate(&result.metrics, window).unwrap()).unwrap()
}

pub fn cluster_series<'a>(rates: &'a MetricsStore, cluster: &str) -> &'a [(f64, f64)] {
    rates
        .series(metrics::CLUSTER_CPU_RATE)
        .find(|(l, _)| l.cluster == cluster)
        .map(|(_, s)| s)
        .unwrap_or_else(|| panic!("no rate series for {cluster}"))
}

pub fn mean_rate(rates: &MetricsStore, cluster: &str, from: f64, to: f64) -> f64 {
    metrics::window_mean(cluster_series(rates, cluster), from, to).unwrap()
}

/// Completed requests per backend cluster index.
pub fn backend_completions(traces: &[RequestTrace], n: usize) -> Vec<u64> {
    let mut c = vec![0; n];
    for t in traces.iter().filter(|t| t.outcome == Outcome::Completed) {
        c[t.backend.unwrap().cluster] += 1;
    }
    c
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / ((a + b) / 2.0)
}

/// Time-average number of requests in the system over `[from, to)`.
pub fn mean_in_system(traces: &[RequestTrace], from: f64, to: f64) -> f64 {
    let area: f64 = traces
        .iter()
        .filter_map(|t| {
            let end = t.response_out?;
            let (a, b) = (t.ingress_in.max(from), end.min(to));
            (b > a).then_some(b - a)
        })
        .sum();
    area / (to - from)
}

/// Standard normal density and distribution function.
pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn big_phi(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 on erf, |error| < 1.5e-7
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-z * z).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

/// E[max(0, X)] for X ~ N(mu, sigma^2).
pub fn clamped_normal_mean(mu: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mu.max(0.0);
    }
    mu * big_phi(mu / sigma) + sigma * phi(mu / sigma)
}
