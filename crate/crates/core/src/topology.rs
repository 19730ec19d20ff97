//! Declarative federation description.
//!
//! A scenario document (YAML) deserializes into [`FederationSpec`], which
//! keeps the document's own units (milliseconds, kilobytes, seconds) so that
//! rendering it back yields an equal spec. [`validate`] checks every
//! invariant and freezes the result into a [`ValidatedTopology`] with
//! clusters indexed in declaration order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineState;
use crate::faults::{self, TimedAction, TimelineAction, TimelineEvent};
use crate::mesh::{LcMode, Policy, ServiceId};
use crate::netem::{JitterSpec, LossSpec, Site};
use crate::workload::{DemandSpec, PayloadSpec, StageProfile, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown field at line {line}, column {column}: {message}")]
    UnknownField { line: usize, column: usize, message: String },
    #[error("missing field: {message}")]
    MissingField { message: String },
    #[error("{field}: expected {expected}, found {found}")]
    Dimension { field: String, expected: String, found: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterRole {
    Edge,
    #[default]
    Datacenter,
    GatewayColocated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub name: String,
    pub nodes: u32,
    pub vcpus_per_node: u32,
    /// Carried for reference only; memory is not modelled.
    #[serde(default)]
    pub memory_per_node: u64,
    #[serde(default)]
    pub role: ClusterRole,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkMatrixSpec {
    /// Entry `[i][j]` is the one-way delay from cluster i to cluster j.
    #[serde(default)]
    pub one_way_delay_ms: Vec<Vec<f64>>,
    #[serde(default)]
    pub jitter: Vec<Vec<JitterSpec>>,
    #[serde(default)]
    pub loss: Vec<Vec<LossSpec>>,
    /// Added to every inter-cluster hop (substrate bias).
    #[serde(default)]
    pub base_delay_ms: f64,
    /// One-way latency of intra-cluster messages.
    #[serde(default)]
    pub intra_delay_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Frontend,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub stage: Stage,
    pub replicas_per_cluster: BTreeMap<String, u32>,
    #[serde(default)]
    pub demand: Option<DemandSpec>,
    /// Policy this service uses to choose replicas of the next stage.
    #[serde(default)]
    pub backend_policy: Policy,
}

impl ServiceSpec {
    pub fn demand_or_default(&self) -> DemandSpec {
        self.demand.unwrap_or(match self.stage {
            Stage::Frontend => DemandSpec::FRONTEND_DEFAULT,
            Stage::Backend => DemandSpec::BACKEND_DEFAULT,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSettings {
    #[serde(default = "EngineSettings::default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "EngineSettings::default_scrape")]
    pub scrape_interval_s: f64,
    #[serde(default = "EngineSettings::default_window")]
    pub rate_window_s: f64,
    #[serde(default)]
    pub lc_mode: LcMode,
}

impl EngineSettings {
    fn default_timeout() -> f64 {
        5.0
    }
    fn default_scrape() -> f64 {
        5.0
    }
    fn default_window() -> f64 {
        60.0
    }
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            timeout_s: Self::default_timeout(),
            scrape_interval_s: Self::default_scrape(),
            rate_window_s: Self::default_window(),
            lc_mode: LcMode::default(),
        }
    }
}

/// Background ping mesh run alongside the workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub interval_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSpec {
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub links: LinkMatrixSpec,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub timeline: Vec<TimelineEvent>,
    #[serde(default)]
    pub engine: EngineSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<ProbeSpec>,
}

fn classify_yaml_error(err: serde_yaml::Error) -> ScenarioError {
    let (line, column) = err.location().map(|l| (l.line(), l.column())).unwrap_or((0, 0));
    let message = err.to_string();
    if message.contains("unknown field") || message.contains("unknown variant") {
        ScenarioError::UnknownField { line, column, message }
    } else if message.contains("missing field") {
        ScenarioError::MissingField { message }
    } else {
        ScenarioError::Syntax { line, column, message }
    }
}

fn check_square<T>(field: &str, m: &[Vec<T>], n: usize) -> Result<(), ScenarioError> {
    if m.len() != n {
        return Err(ScenarioError::Dimension {
            field: field.to_string(),
            expected: format!("{n} rows"),
            found: format!("{} rows", m.len()),
        });
    }
    for (i, row) in m.iter().enumerate() {
        if row.len() != n {
            return Err(ScenarioError::Dimension {
                field: format!("{field}[{i}]"),
                expected: format!("{n} columns"),
                found: format!("{} columns", row.len()),
            });
        }
    }
    Ok(())
}

fn fill_square<T: Clone>(m: &mut Vec<Vec<T>>, n: usize, value: T) {
    if m.is_empty() {
        *m = vec![vec![value; n]; n];
    }
}

impl FederationSpec {
    /// Fill every defaulted field so the spec is fully explicit, checking
    /// matrix shapes against the cluster count.
    pub fn normalize(&mut self) -> Result<(), ScenarioError> {
        let n = self.clusters.len();
        fill_square(&mut self.links.one_way_delay_ms, n, 0.0);
        fill_square(&mut self.links.jitter, n, JitterSpec::NONE);
        fill_square(&mut self.links.loss, n, LossSpec::NONE);
        check_square("links.one_way_delay_ms", &self.links.one_way_delay_ms, n)?;
        check_square("links.jitter", &self.links.jitter, n)?;
        check_square("links.loss", &self.links.loss, n)?;
        for s in &mut self.services {
            s.demand = Some(s.demand_or_default());
        }
        Ok(())
    }
}

/// Parse a scenario document, filling defaults.
pub fn parse_scenario(text: &str) -> Result<FederationSpec, ScenarioError> {
    let mut spec: FederationSpec = serde_yaml::from_str(text).map_err(classify_yaml_error)?;
    spec.normalize()?;
    Ok(spec)
}

/// Render a spec back into a scenario document.
pub fn render_scenario(spec: &FederationSpec) -> String {
    serde_yaml::to_string(spec).expect("FederationSpec always serializes")
}

/// One invariant violation, located by a path into the document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub path: String,
    pub detail: String,
}

impl ValidationError {
    fn new(path: impl Into<String>, detail: impl Into<String>) -> Self {
        ValidationError { path: path.into(), detail: detail.into() }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.path, self.detail)
    }
}

impl std::error::Error for ValidationError {}

/// Frozen, checked federation. Cluster `i` is the i-th declared cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedTopology {
    spec: FederationSpec,
    cluster_index: BTreeMap<String, usize>,
    timeline: Vec<TimedAction>,
    frontend: Option<ServiceId>,
    backend: Option<ServiceId>,
}

impl ValidatedTopology {
    pub fn spec(&self) -> &FederationSpec {
        &self.spec
    }

    pub fn cluster_count(&self) -> usize {
        self.spec.clusters.len()
    }

    pub fn cluster_index(&self, name: &str) -> Option<usize> {
        self.cluster_index.get(name).copied()
    }

    pub fn cluster_name(&self, idx: usize) -> &str {
        &self.spec.clusters[idx].name
    }

    pub fn timeline(&self) -> &[TimedAction] {
        &self.timeline
    }

    pub fn frontend(&self) -> Option<ServiceId> {
        self.frontend
    }

    pub fn backend(&self) -> Option<ServiceId> {
        self.backend
    }

    pub fn service(&self, id: ServiceId) -> &ServiceSpec {
        &self.spec.services[id.0]
    }

    pub fn profile(&self, id: ServiceId) -> StageProfile {
        self.service(id).demand_or_default().profile()
    }

    /// Hops of the route from cluster `a` to cluster `b`: every inter-cluster
    /// route crosses the gateway exactly once, intra-cluster traffic never.
    pub fn path(&self, a: usize, b: usize) -> Vec<Site> {
        if a == b {
            vec![Site::Cluster(a)]
        } else {
            vec![Site::Cluster(a), Site::Gateway, Site::Cluster(b)]
        }
    }

    /// All directed inter-cluster routes, row-major.
    pub fn inter_cluster_paths(&self) -> Vec<Vec<Site>> {
        let n = self.cluster_count();
        (0..n).flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b))).map(|(a, b)| self.path(a, b)).collect()
    }

    /// `(cluster, replica_count)` of a service in cluster order, zero counts omitted.
    pub fn placement(&self, id: ServiceId) -> Vec<(usize, usize)> {
        let svc = self.service(id);
        (0..self.cluster_count())
            .filter_map(|c| {
                let n = svc.replicas_per_cluster.get(self.cluster_name(c)).copied().unwrap_or(0) as usize;
                (n > 0).then_some((c, n))
            })
            .collect()
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Check every invariant of `spec`; on success return the frozen topology,
/// otherwise the complete list of violations.
pub fn validate(spec: &FederationSpec) -> Result<ValidatedTopology, Vec<ValidationError>> {
    let mut errs = Vec::new();
    let mut push = |p: String, d: String| errs.push(ValidationError::new(p, d));
    let n = spec.clusters.len();

    if !(spec.duration_s > 0.0 && spec.duration_s.is_finite()) {
        push("duration_s".into(), format!("= {} must be > 0", spec.duration_s));
    }
    if n == 0 {
        push("clusters".into(), "must declare at least one cluster".into());
    }
    let mut cluster_index = BTreeMap::new();
    for (i, c) in spec.clusters.iter().enumerate() {
        let p = format!("clusters[{i}]");
        if !is_identifier(&c.name) {
            push(format!("{p}.name"), format!("{:?} must be a non-empty identifier [A-Za-z0-9_.-]", c.name));
        } else if cluster_index.insert(c.name.clone(), i).is_some() {
            push(format!("{p}.name"), format!("{:?} is not unique", c.name));
        }
        if c.nodes < 1 {
            push(format!("{p}.nodes"), "must be >= 1".into());
        }
        if c.vcpus_per_node < 1 {
            push(format!("{p}.vcpus_per_node"), "must be >= 1".into());
        }
    }

    let links = &spec.links;
    let shapes_ok = [
        ("links.one_way_delay_ms", links.one_way_delay_ms.len(), links.one_way_delay_ms.iter().all(|r| r.len() == n)),
        ("links.jitter", links.jitter.len(), links.jitter.iter().all(|r| r.len() == n)),
        ("links.loss", links.loss.len(), links.loss.iter().all(|r| r.len() == n)),
    ]
    .into_iter()
    .map(|(f, rows, cols_ok)| {
        let ok = rows == n && cols_ok;
        if !ok {
            push(f.into(), format!("must be a {n}x{n} matrix"));
        }
        ok
    })
    .fold(true, |a, b| a && b);
    if shapes_ok {
        for i in 0..n {
            for j in 0..n {
                let d = links.one_way_delay_ms[i][j];
                if d < 0.0 {
                    push(format!("links.one_way_delay_ms[{i}][{j}]"), "< 0".into());
                } else if !d.is_finite() {
                    push(format!("links.one_way_delay_ms[{i}][{j}]"), "is not finite".into());
                } else if i == j && d != 0.0 {
                    push(format!("links.one_way_delay_ms[{i}][{j}]"), "diagonal must be 0".into());
                }
                let jit = links.jitter[i][j];
                if !(jit.scale_ms >= 0.0 && jit.scale_ms.is_finite()) {
                    push(format!("links.jitter[{i}][{j}].scale_ms"), "must be finite and >= 0".into());
                }
                let l = links.loss[i][j];
                if !(0.0..=1.0).contains(&l.p) {
                    push(format!("links.loss[{i}][{j}].p"), "outside [0, 1]".into());
                }
                if !(0.0..=1.0).contains(&l.correlation) {
                    push(format!("links.loss[{i}][{j}].correlation"), "outside [0, 1]".into());
                }
            }
        }
    }
    for (f, v) in [("links.base_delay_ms", links.base_delay_ms), ("links.intra_delay_ms", links.intra_delay_ms)] {
        if !(v >= 0.0 && v.is_finite()) {
            push(f.into(), "must be finite and >= 0".into());
        }
    }

    let mut names = BTreeSet::new();
    let mut frontend = None;
    let mut backend = None;
    for (s, svc) in spec.services.iter().enumerate() {
        let p = format!("services[{s}]");
        if !is_identifier(&svc.name) {
            push(format!("{p}.name"), format!("{:?} must be a non-empty identifier", svc.name));
        } else if !names.insert(svc.name.as_str()) {
            push(format!("{p}.name"), format!("{:?} is not unique", svc.name));
        }
        let slot = match svc.stage {
            Stage::Frontend => &mut frontend,
            Stage::Backend => &mut backend,
        };
        if slot.is_some() {
            push(format!("{p}.stage"), format!("{:?}: only one service per stage is supported", svc.stage));
        } else {
            *slot = Some(ServiceId(s));
        }
        for cluster in svc.replicas_per_cluster.keys() {
            if !cluster_index.contains_key(cluster) {
                push(format!("{p}.replicas_per_cluster.{cluster}"), format!("references unknown cluster {cluster:?}"));
            }
        }
        if svc.replicas_per_cluster.values().sum::<u32>() == 0 {
            push(format!("{p}.replicas_per_cluster"), "needs at least one replica in total".into());
        }
        let d = svc.demand_or_default();
        if !(d.base_ms >= 0.0 && d.base_ms.is_finite()) {
            push(format!("{p}.demand.base_ms"), "must be finite and >= 0".into());
        }
        if !(d.per_kb_ms >= 0.0 && d.per_kb_ms.is_finite()) {
            push(format!("{p}.demand.per_kb_ms"), "must be finite and >= 0".into());
        }
        if !(d.reduction > 0.0 && d.reduction <= 1.0) {
            push(format!("{p}.demand.reduction"), "outside (0, 1]".into());
        }
    }

    let w = &spec.workload;
    for (i, ph) in w.phases.iter().enumerate() {
        if !(ph.rate >= 0.0 && ph.rate.is_finite()) {
            push(format!("workload.phases[{i}].rate"), "must be finite and >= 0".into());
        }
        if !(ph.duration_s > 0.0 && ph.duration_s.is_finite()) {
            push(format!("workload.phases[{i}].duration_s"), "must be > 0".into());
        }
    }
    if w.phases.iter().any(|p| p.rate > 0.0) && frontend.is_none() {
        push("workload".into(), "generates requests but no frontend service is declared".into());
    }
    match &w.payload {
        PayloadSpec::Constant { .. } => {}
        PayloadSpec::Lognormal { mu, sigma } => {
            if !(mu.is_finite() && *sigma >= 0.0 && sigma.is_finite()) {
                push("workload.payload".into(), "lognormal needs finite mu and sigma >= 0".into());
            }
        }
        PayloadSpec::Empirical { sizes, .. } => {
            if sizes.is_empty() {
                push("workload.payload.sizes".into(), "empirical list is empty".into());
            }
        }
    }

    let e = &spec.engine;
    if !(e.timeout_s > 0.0 && e.timeout_s.is_finite()) {
        push("engine.timeout_s".into(), "must be > 0".into());
    }
    if !(e.scrape_interval_s > 0.0 && e.scrape_interval_s.is_finite()) {
        push("engine.scrape_interval_s".into(), "must be > 0".into());
    } else {
        let k = e.rate_window_s / e.scrape_interval_s;
        if !(k >= 2.0 - 1e-9) || (k - k.round()).abs() > 1e-9 {
            push("engine.rate_window_s".into(), "must be a multiple (>= 2) of engine.scrape_interval_s".into());
        }
    }
    if let Some(p) = spec.probes {
        if !(p.interval_s > 0.0 && p.interval_s.is_finite()) {
            push("probes.interval_s".into(), "must be > 0".into());
        }
    }

    for (i, ev) in spec.timeline.iter().enumerate() {
        let p = format!("timeline[{i}]");
        if !(ev.at_s >= 0.0 && ev.at_s.is_finite()) {
            push(format!("{p}.at_s"), "must be finite and >= 0".into());
        }
        match &ev.action {
            TimelineAction::Blackout { end_s, .. } if !(*end_s > ev.at_s) => {
                push(format!("{p}.params.end_s"), "must be greater than at_s".into());
            }
            TimelineAction::SetLink { delay_ms, jitter, loss_p, loss_corr, src, dst, .. } => {
                if src == dst {
                    push(format!("{p}.params"), "set_link needs distinct src and dst".into());
                }
                if !(*delay_ms >= 0.0 && delay_ms.is_finite()) {
                    push(format!("{p}.params.delay_ms"), "must be finite and >= 0".into());
                }
                if !(jitter.scale_ms >= 0.0 && jitter.scale_ms.is_finite()) {
                    push(format!("{p}.params.jitter.scale_ms"), "must be finite and >= 0".into());
                }
                if !(0.0..=1.0).contains(loss_p) {
                    push(format!("{p}.params.loss_p"), "outside [0, 1]".into());
                }
                if !(0.0..=1.0).contains(loss_corr) {
                    push(format!("{p}.params.loss_corr"), "outside [0, 1]".into());
                }
            }
            _ => {}
        }
    }

    if !errs.is_empty() {
        return Err(errs);
    }

    let timeline = match faults::compile_timeline(&spec.timeline, spec, &cluster_index) {
        Ok(t) => t,
        Err(e) => return Err(vec![ValidationError::new(format!("timeline[{}]", e.index), e.kind.to_string())]),
    };

    Ok(ValidatedTopology { spec: spec.clone(), cluster_index, timeline, frontend, backend })
}

/// Materialize runtime state for one engine run.
pub fn build_runtime(topology: &ValidatedTopology) -> EngineState {
    EngineState::new(topology.clone())
}
