//! Discrete-event core.
//!
//! A single event queue ordered by `(time, seq)` drives the whole
//! federation: client arrivals at the gateway ingress, frontend and backend
//! service at replicas, messages crossing the gateway, response timeouts,
//! timeline actions, metric scrapes and RTT probes. Each replica is a FIFO
//! server whose slots are the vCPUs of its node shared evenly with the other
//! replicas placed there; a request occupies one slot for its full demand and
//! adds that demand to the replica's busy counter when it finishes.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::faults;
use crate::mesh::{ingress_route, BalancerState, EndpointKey, LcDelta, MeshError, Policy, Registry, ServiceId};
use crate::metrics::{Labels, MetricsStore, BUSY_SECONDS, OUTSTANDING};
use crate::netem::{sample_delay, sample_loss, ClassifierTable, LossState, Site, TrafficClass};
use crate::rng::{stream, StreamId};
use crate::topology::ValidatedTopology;
use crate::workload::{service_demand, ArrivalGenerator, PayloadSampler, StageProfile};

/// How many recent events are kept for post-mortem dumps.
const RECENT_EVENTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("event scheduled at {at} before current time {now}")]
    ScheduleInPast { now: f64, at: f64 },
    #[error("run until {until} exceeds scenario duration {duration}")]
    UntilBeyondDuration { until: f64, duration: f64 },
    #[error("run until {until} is before current time {now}")]
    UntilInPast { until: f64, now: f64 },
    #[error("event queue corrupted: {0}")]
    QueueCorruption(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    ToBackend,
    ToFrontend,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    Arrival,
    LinkDeliver { req: usize, leg: Leg },
    ServiceComplete { replica: usize, req: usize, demand: f64 },
    Timeout { req: usize },
    TimelineApply { index: usize },
    Scrape { k: u64 },
    ProbeSend { pair: usize, k: u64 },
    ProbeReflect { probe: usize },
    ProbeRecv { probe: usize },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::LinkDeliver { .. } => "link_deliver",
            EventKind::ServiceComplete { .. } => "service_complete",
            EventKind::Timeout { .. } => "timeout",
            EventKind::TimelineApply { .. } => "timeline_apply",
            EventKind::Scrape { .. } => "scrape",
            EventKind::ProbeSend { .. } => "probe_send",
            EventKind::ProbeReflect { .. } => "probe_reflect",
            EventKind::ProbeRecv { .. } => "probe_recv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} #{} {:?}", self.time, self.seq, self.kind)
    }
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    Completed,
    /// A message was dropped on a link and the response timeout fired.
    Lost,
    /// No message was dropped but the response did not arrive in time.
    TimedOut,
    /// No healthy endpoint was available.
    Failed,
    InFlight,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Completed => "completed",
            Outcome::Lost => "lost",
            Outcome::TimedOut => "timed_out",
            Outcome::Failed => "failed",
            Outcome::InFlight => "in_flight",
        })
    }
}

/// Life of one client request. Timestamps are non-decreasing in field order.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestTrace {
    pub id: u64,
    pub ingress_in: f64,
    pub fe_start: Option<f64>,
    pub fe_end: Option<f64>,
    pub be_dispatch: Option<f64>,
    pub be_start: Option<f64>,
    pub be_end: Option<f64>,
    pub response_out: Option<f64>,
    pub payload_bytes: u64,
    pub reduced_bytes: u64,
    pub fe_demand: f64,
    pub be_demand: f64,
    pub frontend: Option<EndpointKey>,
    pub backend: Option<EndpointKey>,
    pub outcome: Outcome,
}

impl RequestTrace {
    fn new(id: u64, t: f64, payload_bytes: u64) -> Self {
        RequestTrace {
            id,
            ingress_in: t,
            fe_start: None,
            fe_end: None,
            be_dispatch: None,
            be_start: None,
            be_end: None,
            response_out: None,
            payload_bytes,
            reduced_bytes: 0,
            fe_demand: 0.0,
            be_demand: 0.0,
            frontend: None,
            backend: None,
            outcome: Outcome::InFlight,
        }
    }

    pub fn latency(&self) -> Option<f64> {
        self.response_out.map(|t| t - self.ingress_in)
    }

    /// Present timestamps in lifecycle order.
    pub fn timestamps(&self) -> Vec<f64> {
        [Some(self.ingress_in), self.fe_start, self.fe_end, self.be_dispatch, self.be_start, self.be_end, self.response_out]
            .into_iter()
            .flatten()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeOutcome {
    Pending,
    Rtt(f64),
    Lost,
}

/// One ping between two clusters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSample {
    pub src: usize,
    pub dst: usize,
    pub sent_at: f64,
    pub outcome: ProbeOutcome,
    fwd_ms: f64,
    ret_ms: f64,
}

impl ProbeSample {
    pub fn new(src: usize, dst: usize, sent_at: f64, outcome: ProbeOutcome) -> Self {
        ProbeSample { src, dst, sent_at, outcome, fwd_ms: 0.0, ret_ms: 0.0 }
    }

    pub fn rtt_ms(&self) -> Option<f64> {
        match self.outcome {
            ProbeOutcome::Rtt(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ProbePlan {
    pairs: Vec<(usize, usize)>,
    interval: f64,
    count: u64,
}

#[derive(Debug, Clone)]
struct Job {
    req: usize,
    demand: f64,
}

#[derive(Debug, Clone)]
pub struct ReplicaState {
    pub key: EndpointKey,
    pub node: usize,
    pub concurrency_limit: usize,
    pub in_service: usize,
    pub busy_vcpu_seconds: f64,
    pub completed: u64,
    queue: VecDeque<Job>,
    labels: Labels,
}

impl ReplicaState {
    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }
}

#[derive(Debug, Clone, Default)]
struct ReqState {
    sidecar: Option<usize>,
    pending: bool,
    dropped: bool,
}

#[derive(Debug, Clone)]
struct LinkState {
    delay_rng: ChaCha8Rng,
    loss_rng: ChaCha8Rng,
    loss: LossState,
}

/// Everything a finished (or paused) run has produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub metrics: MetricsStore,
    pub traces: Vec<RequestTrace>,
    pub probes: Vec<ProbeSample>,
    pub event_count: u64,
}

/// Concurrency limit and node of every replica of `topo`.
///
/// Replicas land on a cluster's nodes round robin, continuing the count
/// across services in declaration order; a replica's limit is its node's
/// vCPUs divided by the replicas sharing that node, at least 1.
pub fn place_replicas(topo: &ValidatedTopology) -> BTreeMap<EndpointKey, (usize, usize)> {
    let spec = topo.spec();
    let mut node_of = BTreeMap::new();
    let mut next_node = vec![0usize; topo.cluster_count()];
    let mut load: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in 0..spec.services.len() {
        let id = ServiceId(s);
        for (c, n) in topo.placement(id) {
            for r in 0..n {
                let node = next_node[c] % spec.clusters[c].nodes as usize;
                next_node[c] += 1;
                *load.entry((c, node)).or_insert(0) += 1;
                node_of.insert(EndpointKey { service: id, cluster: c, replica: r }, node);
            }
        }
    }
    node_of
        .into_iter()
        .map(|(key, node)| {
            let vcpus = spec.clusters[key.cluster].vcpus_per_node as usize;
            let limit = (vcpus / load[&(key.cluster, node)]).max(1);
            (key, (node, limit))
        })
        .collect()
}

/// Live state of one run.
#[derive(Debug, Clone)]
pub struct EngineState {
    topo: ValidatedTopology,
    now: f64,
    seq: u64,
    started: bool,
    queue: BinaryHeap<Reverse<Event>>,
    event_count: u64,
    recent: VecDeque<Event>,
    log: Option<Vec<Event>>,

    netem: ClassifierTable,
    links: BTreeMap<(Site, Site), LinkState>,
    registry: Registry,
    ingress: BalancerState,
    sidecars: Vec<BalancerState>,
    sidecar_of: BTreeMap<EndpointKey, usize>,
    replicas: Vec<ReplicaState>,
    replica_of: BTreeMap<EndpointKey, usize>,
    profiles: Vec<StageProfile>,

    workload_enabled: bool,
    arrivals: ArrivalGenerator,
    arrival_rng: ChaCha8Rng,
    payloads: PayloadSampler,
    payload_rng: ChaCha8Rng,

    traces: Vec<RequestTrace>,
    req_state: Vec<ReqState>,
    probe_plan: Option<ProbePlan>,
    probes: Vec<ProbeSample>,
    metrics: MetricsStore,
}

impl EngineState {
    pub fn new(topo: ValidatedTopology) -> Self {
        let spec = topo.spec();
        let seed = spec.seed;
        let lc_mode = spec.engine.lc_mode;

        let mut netem = ClassifierTable::new();
        for (i, row) in spec.links.one_way_delay_ms.iter().enumerate() {
            for (j, &delay_ms) in row.iter().enumerate() {
                if i == j {
                    continue;
                }
                netem.install(crate::netem::ImpairmentRule {
                    src: Site::Cluster(i),
                    dst: Site::Cluster(j),
                    delay_ms,
                    jitter: spec.links.jitter[i][j],
                    loss: spec.links.loss[i][j],
                    scope: TrafficClass::Data,
                });
            }
        }

        let placements: Vec<(String, Vec<(usize, usize)>)> =
            (0..spec.services.len()).map(|s| (spec.services[s].name.clone(), topo.placement(ServiceId(s)))).collect();
        let registry = Registry::new(&placements);

        let placed = place_replicas(&topo);
        let mut replicas = Vec::new();
        let mut replica_of = BTreeMap::new();
        for (key, (node, limit)) in placed {
            replica_of.insert(key, replicas.len());
            replicas.push(ReplicaState {
                key,
                node,
                concurrency_limit: limit,
                in_service: 0,
                busy_vcpu_seconds: 0.0,
                completed: 0,
                queue: VecDeque::new(),
                labels: Labels {
                    cluster: topo.cluster_name(key.cluster).to_string(),
                    service: spec.services[key.service.0].name.clone(),
                    replica: Some(key.replica),
                },
            });
        }

        let mut sidecars = Vec::new();
        let mut sidecar_of = BTreeMap::new();
        if let Some(fe) = topo.frontend() {
            let policy = topo.service(fe).backend_policy;
            for (i, ep) in registry.service(fe).ingress_order.iter().enumerate() {
                sidecar_of.insert(ep.key(), i);
                sidecars.push(BalancerState::new(policy, lc_mode, stream(seed, StreamId::Balancer(i + 1))));
            }
        }

        let profiles = (0..spec.services.len()).map(|s| topo.profile(ServiceId(s))).collect();
        let payloads = PayloadSampler::new(&spec.workload.payload).expect("payload spec validated");
        let arrivals = ArrivalGenerator::new(&spec.workload);

        EngineState {
            now: 0.0,
            seq: 0,
            started: false,
            queue: BinaryHeap::new(),
            event_count: 0,
            recent: VecDeque::with_capacity(RECENT_EVENTS),
            log: None,
            netem,
            links: BTreeMap::new(),
            registry,
            ingress: BalancerState::new(Policy::RoundRobin, lc_mode, stream(seed, StreamId::Balancer(0))),
            sidecars,
            sidecar_of,
            replicas,
            replica_of,
            profiles,
            workload_enabled: true,
            arrivals,
            arrival_rng: stream(seed, StreamId::Arrivals),
            payloads,
            payload_rng: stream(seed, StreamId::Payload),
            traces: Vec::new(),
            req_state: Vec::new(),
            probe_plan: spec.probes.map(|p| ProbePlan {
                pairs: all_pairs(topo.cluster_count()),
                interval: p.interval_s,
                count: probe_count(spec.duration_s, p.interval_s),
            }),
            probes: Vec::new(),
            metrics: MetricsStore::new(),
            topo,
        }
    }

    pub fn topology(&self) -> &ValidatedTopology {
        &self.topo
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn event_count(&self) -> u64 {
        self.event_count
    }

    pub fn netem(&self) -> &ClassifierTable {
        &self.netem
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn replicas(&self) -> &[ReplicaState] {
        &self.replicas
    }

    pub fn sidecars(&self) -> &[BalancerState] {
        &self.sidecars
    }

    pub fn traces(&self) -> &[RequestTrace] {
        &self.traces
    }

    /// The last few executed events, oldest first.
    pub fn recent_events(&self) -> impl Iterator<Item = &Event> {
        self.recent.iter()
    }

    /// Keep every executed event for later inspection.
    pub fn enable_event_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn event_log(&self) -> Option<&[Event]> {
        self.log.as_deref()
    }

    /// Suppress client arrivals (used by the ping experiment).
    pub fn disable_workload(&mut self) {
        self.workload_enabled = false;
    }

    /// Send `count` probes per pair at `k * interval`, replacing any probe
    /// plan from the scenario. Must be called before the first run.
    pub fn set_probes(&mut self, pairs: Vec<(usize, usize)>, interval: f64, count: u64) {
        debug_assert!(!self.started);
        self.probe_plan = Some(ProbePlan { pairs, interval, count });
    }

    /// Enqueue an event. Scheduling before the current time is an error.
    pub fn schedule(&mut self, at: f64, kind: EventKind) -> Result<(), EngineError> {
        if at.is_nan() || at < self.now {
            return Err(EngineError::ScheduleInPast { now: self.now, at });
        }
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Event { time: at, seq, kind }));
        Ok(())
    }

    fn bootstrap(&mut self) -> Result<(), EngineError> {
        self.started = true;
        for index in 0..self.topo.timeline().len() {
            let at = self.topo.timeline()[index].at;
            self.schedule(at, EventKind::TimelineApply { index })?;
        }
        self.schedule(0.0, EventKind::Scrape { k: 0 })?;
        if self.workload_enabled && self.topo.frontend().is_some() {
            if let Some(t) = self.arrivals.next(&mut self.arrival_rng) {
                self.schedule(t, EventKind::Arrival)?;
            }
        }
        if let Some(plan) = &self.probe_plan {
            if plan.count > 0 {
                for pair in 0..plan.pairs.len() {
                    self.schedule(0.0, EventKind::ProbeSend { pair, k: 0 })?;
                }
            }
        }
        Ok(())
    }

    /// Execute every event with `time < until`, then leave the clock at
    /// `until`. May be called repeatedly with increasing horizons.
    pub fn run(&mut self, until: f64) -> Result<RunResult, EngineError> {
        let duration = self.topo.spec().duration_s;
        if until > duration {
            return Err(EngineError::UntilBeyondDuration { until, duration });
        }
        if until < self.now {
            return Err(EngineError::UntilInPast { until, now: self.now });
        }
        if !self.started {
            self.bootstrap()?;
        }
        while let Some(Reverse(ev)) = self.queue.peek().copied() {
            if ev.time >= until {
                break;
            }
            self.queue.pop();
            if ev.time < self.now {
                return Err(EngineError::QueueCorruption(format!("popped {ev} behind clock {}", self.now)));
            }
            self.now = ev.time;
            self.event_count += 1;
            if self.recent.len() == RECENT_EVENTS {
                self.recent.pop_front();
            }
            self.recent.push_back(ev);
            if let Some(log) = &mut self.log {
                log.push(ev);
            }
            self.handle(ev.kind)?;
        }
        self.now = until;
        Ok(self.result())
    }

    /// Snapshot of everything produced so far.
    pub fn result(&self) -> RunResult {
        RunResult {
            metrics: self.metrics.clone(),
            traces: self.traces.clone(),
            probes: self.probes.clone(),
            event_count: self.event_count,
        }
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), EngineError> {
        match kind {
            EventKind::Arrival => self.on_arrival(),
            EventKind::LinkDeliver { req, leg: Leg::ToBackend } => self.on_backend_delivery(req),
            EventKind::LinkDeliver { req, leg: Leg::ToFrontend } => self.on_response(req),
            EventKind::ServiceComplete { replica, req, demand } => self.on_complete(replica, req, demand),
            EventKind::Timeout { req } => self.on_timeout(req),
            EventKind::TimelineApply { index } => {
                let action = self.topo.timeline()[index].action.clone();
                log::debug!("t={} apply {:?}", self.now, action);
                faults::apply(&action, &mut self.netem, &mut self.registry)?;
                Ok(())
            }
            EventKind::Scrape { k } => self.on_scrape(k),
            EventKind::ProbeSend { pair, k } => self.on_probe_send(pair, k),
            EventKind::ProbeReflect { probe } => self.on_probe_reflect(probe),
            EventKind::ProbeRecv { probe } => {
                // Assembled from the sampled legs rather than the clock so a
                // jitter-free path reports its configured RTT exactly.
                let p = &mut self.probes[probe];
                let base = if p.src == p.dst { 0.0 } else { self.topo.spec().links.base_delay_ms };
                p.outcome = ProbeOutcome::Rtt(p.fwd_ms + p.ret_ms + 2.0 * base);
                Ok(())
            }
        }
    }

    fn link(&mut self, src: Site, dst: Site) -> &mut LinkState {
        let seed = self.topo.spec().seed;
        self.links.entry((src, dst)).or_insert_with(|| LinkState {
            delay_rng: stream(seed, StreamId::LinkDelay(src, dst)),
            loss_rng: stream(seed, StreamId::LinkLoss(src, dst)),
            loss: LossState::default(),
        })
    }

    /// Pass one data message from cluster `a` to cluster `b`. Returns the
    /// one-way latency in milliseconds, or `None` if the message is dropped.
    fn transmit(&mut self, a: usize, b: usize) -> Option<f64> {
        let base = if a == b { 0.0 } else { self.topo.spec().links.base_delay_ms };
        self.netem_leg(a, b).map(|ms| base + ms)
    }

    /// Latency of one message excluding the base hop delay: the intra-cluster
    /// delay when `a == b`, otherwise a netem sample of the `a -> b` rule.
    fn netem_leg(&mut self, a: usize, b: usize) -> Option<f64> {
        if a == b {
            return Some(self.topo.spec().links.intra_delay_ms);
        }
        let rule = self.netem.classify(Site::Cluster(a), Site::Cluster(b), TrafficClass::Data);
        let link = self.link(Site::Cluster(a), Site::Cluster(b));
        let delay = sample_delay(&rule, &mut link.delay_rng);
        let lost = sample_loss(&rule, &mut link.loss_rng, &mut link.loss);
        (!lost).then_some(delay)
    }

    fn on_arrival(&mut self) -> Result<(), EngineError> {
        let t = self.now;
        if let Some(next) = self.arrivals.next(&mut self.arrival_rng) {
            self.schedule(next, EventKind::Arrival)?;
        }
        let id = self.traces.len();
        let payload = self.payloads.sample(&mut self.payload_rng);
        self.traces.push(RequestTrace::new(id as u64, t, payload));
        self.req_state.push(ReqState::default());

        let fe = self.topo.frontend().expect("arrivals only scheduled with a frontend");
        let endpoints = &self.registry.service(fe).ingress_order;
        let idx = match ingress_route(&mut self.ingress, endpoints) {
            Ok(i) => i,
            Err(MeshError::NoHealthyEndpoint) => {
                self.traces[id].outcome = Outcome::Failed;
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let key = endpoints[idx].key();
        let demand = service_demand(&self.profiles[fe.0], payload);
        let trace = &mut self.traces[id];
        trace.frontend = Some(key);
        trace.fe_demand = demand;
        self.req_state[id].sidecar = Some(self.sidecar_of[&key]);
        self.req_state[id].pending = true;
        self.admit(self.replica_of[&key], id, demand)
    }

    fn admit(&mut self, replica: usize, req: usize, demand: f64) -> Result<(), EngineError> {
        let r = &mut self.replicas[replica];
        if r.in_service < r.concurrency_limit {
            self.start(replica, req, demand)
        } else {
            r.queue.push_back(Job { req, demand });
            Ok(())
        }
    }

    fn start(&mut self, replica: usize, req: usize, demand: f64) -> Result<(), EngineError> {
        let now = self.now;
        let r = &mut self.replicas[replica];
        r.in_service += 1;
        let trace = &mut self.traces[req];
        if Some(r.key.service) == self.topo.frontend() {
            trace.fe_start = Some(now);
        } else {
            trace.be_start = Some(now);
        }
        self.schedule(now + demand, EventKind::ServiceComplete { replica, req, demand })
    }

    fn on_complete(&mut self, replica: usize, req: usize, demand: f64) -> Result<(), EngineError> {
        let r = &mut self.replicas[replica];
        r.in_service -= 1;
        r.busy_vcpu_seconds += demand;
        r.completed += 1;
        let key = r.key;
        if let Some(job) = r.queue.pop_front() {
            self.start(replica, job.req, job.demand)?;
        }
        if Some(key.service) == self.topo.frontend() {
            self.after_frontend(req, key)
        } else {
            self.after_backend(req, key)
        }
    }

    fn after_frontend(&mut self, req: usize, fe_key: EndpointKey) -> Result<(), EngineError> {
        let now = self.now;
        let fe = fe_key.service;
        let reduced = self.profiles[fe.0].output_bytes(self.traces[req].payload_bytes);
        let trace = &mut self.traces[req];
        trace.fe_end = Some(now);
        trace.reduced_bytes = reduced;

        let Some(be) = self.topo.backend() else {
            trace.response_out = Some(now);
            trace.outcome = Outcome::Completed;
            self.req_state[req].pending = false;
            return Ok(());
        };
        let sidecar = self.req_state[req].sidecar.expect("set at ingress");
        let endpoints = &self.registry.service(be).mesh_order;
        let idx = match self.sidecars[sidecar].pick(endpoints) {
            Ok(i) => i,
            Err(MeshError::NoHealthyEndpoint) => {
                self.traces[req].outcome = Outcome::Failed;
                self.req_state[req].pending = false;
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let be_key = endpoints[idx].key();
        self.sidecars[sidecar].lc_update(be_key, LcDelta::Acquire)?;
        let demand = service_demand(&self.profiles[be.0], reduced);
        let trace = &mut self.traces[req];
        trace.be_dispatch = Some(now);
        trace.backend = Some(be_key);
        trace.be_demand = demand;

        let timeout = self.topo.spec().engine.timeout_s;
        self.schedule(now + timeout, EventKind::Timeout { req })?;
        match self.transmit(fe_key.cluster, be_key.cluster) {
            Some(ms) => self.schedule(now + ms / 1e3, EventKind::LinkDeliver { req, leg: Leg::ToBackend }),
            None => {
                self.req_state[req].dropped = true;
                Ok(())
            }
        }
    }

    fn on_backend_delivery(&mut self, req: usize) -> Result<(), EngineError> {
        let key = self.traces[req].backend.expect("dispatched");
        let demand = self.traces[req].be_demand;
        self.admit(self.replica_of[&key], req, demand)
    }

    fn after_backend(&mut self, req: usize, be_key: EndpointKey) -> Result<(), EngineError> {
        let now = self.now;
        self.traces[req].be_end = Some(now);
        let fe_cluster = self.traces[req].frontend.expect("routed").cluster;
        match self.transmit(be_key.cluster, fe_cluster) {
            Some(ms) => self.schedule(now + ms / 1e3, EventKind::LinkDeliver { req, leg: Leg::ToFrontend }),
            None => {
                self.req_state[req].dropped = true;
                Ok(())
            }
        }
    }

    fn release(&mut self, req: usize) -> Result<(), EngineError> {
        self.req_state[req].pending = false;
        let sidecar = self.req_state[req].sidecar.expect("set at ingress");
        let key = self.traces[req].backend.expect("dispatched");
        self.sidecars[sidecar].lc_update(key, LcDelta::Release)?;
        Ok(())
    }

    fn on_response(&mut self, req: usize) -> Result<(), EngineError> {
        if !self.req_state[req].pending {
            return Ok(());
        }
        self.release(req)?;
        let trace = &mut self.traces[req];
        trace.response_out = Some(self.now);
        trace.outcome = Outcome::Completed;
        Ok(())
    }

    fn on_timeout(&mut self, req: usize) -> Result<(), EngineError> {
        if !self.req_state[req].pending {
            return Ok(());
        }
        self.release(req)?;
        self.traces[req].outcome = if self.req_state[req].dropped { Outcome::Lost } else { Outcome::TimedOut };
        Ok(())
    }

    fn on_scrape(&mut self, k: u64) -> Result<(), EngineError> {
        let t = self.now;
        let interval = self.topo.spec().engine.scrape_interval_s;
        let n = self.topo.cluster_count();
        // One control message per cluster carries that cluster's samples.
        let mut reachable = vec![true; n];
        for (c, ok) in reachable.iter_mut().enumerate() {
            let rule = self.netem.classify(Site::Cluster(c), Site::Gateway, TrafficClass::Control);
            let link = self.link(Site::Cluster(c), Site::Gateway);
            *ok = !sample_loss(&rule, &mut link.loss_rng, &mut link.loss);
        }
        let mut outstanding: BTreeMap<EndpointKey, u32> = BTreeMap::new();
        for sc in &self.sidecars {
            for (key, &n) in sc.outstanding_by_endpoint() {
                *outstanding.entry(*key).or_insert(0) += n;
            }
        }
        let backend = self.topo.backend();
        for r in &self.replicas {
            if !reachable[r.key.cluster] {
                continue;
            }
            self.metrics.record(BUSY_SECONDS, r.labels.clone(), t, r.busy_vcpu_seconds);
            if Some(r.key.service) == backend {
                let v = outstanding.get(&r.key).copied().unwrap_or(0);
                self.metrics.record(OUTSTANDING, r.labels.clone(), t, v as f64);
            }
        }
        self.schedule((k + 1) as f64 * interval, EventKind::Scrape { k: k + 1 })
    }

    fn on_probe_send(&mut self, pair: usize, k: u64) -> Result<(), EngineError> {
        let plan = self.probe_plan.as_ref().expect("probe events need a plan");
        let (src, dst) = plan.pairs[pair];
        let (interval, count) = (plan.interval, plan.count);
        if k + 1 < count {
            self.schedule((k + 1) as f64 * interval, EventKind::ProbeSend { pair, k: k + 1 })?;
        }
        let probe = self.probes.len();
        let mut sample = ProbeSample::new(src, dst, self.now, ProbeOutcome::Pending);
        match self.netem_leg(src, dst) {
            Some(ms) => {
                sample.fwd_ms = ms;
                self.probes.push(sample);
                let at = self.now + (self.base_ms(src, dst) + ms) / 1e3;
                self.schedule(at, EventKind::ProbeReflect { probe })
            }
            None => {
                sample.outcome = ProbeOutcome::Lost;
                self.probes.push(sample);
                Ok(())
            }
        }
    }

    fn on_probe_reflect(&mut self, probe: usize) -> Result<(), EngineError> {
        let ProbeSample { src, dst, .. } = self.probes[probe];
        match self.netem_leg(dst, src) {
            Some(ms) => {
                self.probes[probe].ret_ms = ms;
                let at = self.now + (self.base_ms(dst, src) + ms) / 1e3;
                self.schedule(at, EventKind::ProbeRecv { probe })
            }
            None => {
                self.probes[probe].outcome = ProbeOutcome::Lost;
                Ok(())
            }
        }
    }

    fn base_ms(&self, a: usize, b: usize) -> f64 {
        if a == b {
            0.0
        } else {
            self.topo.spec().links.base_delay_ms
        }
    }
}

/// Every ordered cluster pair, diagonal included, row-major.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect()
}

/// `floor(duration / interval)`, robust to representation error.
pub fn probe_count(duration: f64, interval: f64) -> u64 {
    (duration / interval + 1e-9).floor() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_runtime, parse_scenario, validate};

    fn engine(doc: &str) -> EngineState {
        build_runtime(&validate(&parse_scenario(doc).unwrap()).unwrap())
    }

    const FOUR: &str = "\
duration_s: 600
clusters:
  - {name: C1, nodes: 4, vcpus_per_node: 4, role: edge}
  - {name: C2, nodes: 4, vcpus_per_node: 4, role: edge}
  - {name: C3, nodes: 4, vcpus_per_node: 4}
  - {name: C4, nodes: 4, vcpus_per_node: 4}
links:
  one_way_delay_ms:
    - [0, 0, 25, 0]
    - [0, 0, 25, 0]
    - [25, 25, 0, 0]
    - [0, 0, 0, 0]
services:
  - {name: frontend, stage: frontend, replicas_per_cluster: {C1: 2, C2: 2}}
  - {name: backend, stage: backend, replicas_per_cluster: {C3: 3, C4: 3}}
";

    fn with_workload(base: &str, workload: &str) -> String {
        format!("{base}workload:\n{workload}")
    }

    #[test]
    fn empty_workload_only_scrapes() {
        let mut e = engine(FOUR);
        let r = e.run(600.0).unwrap();
        assert!(r.traces.is_empty());
        assert_eq!(r.event_count, 120);
        let busy: Vec<_> = r.metrics.series(crate::metrics::BUSY_SECONDS).collect();
        assert_eq!(busy.len(), 10);
        for (_, s) in busy {
            assert_eq!(s.len(), 120);
            assert!(s.iter().all(|&(_, v)| v == 0.0));
        }
    }

    #[test]
    fn single_request_latency_is_sum_of_demands() {
        let doc = FOUR.replace("[0, 0, 25, 0]", "[0, 0, 0, 0]").replace("[25, 25, 0, 0]", "[0, 0, 0, 0]");
        let doc = with_workload(&doc, "  phases: [{rate: 1, duration_s: 1}]\n");
        let r = engine(&doc).run(600.0).unwrap();
        assert_eq!(r.traces.len(), 1);
        let t = &r.traces[0];
        assert_eq!(t.outcome, Outcome::Completed);
        // 300 kB payload: frontend 20 + 0.01*300 ms, backend 80 + 0.02*100 ms
        assert!((t.fe_demand - 0.023).abs() < 1e-12);
        assert!((t.be_demand - 0.082).abs() < 1e-12);
        assert_eq!(t.latency().unwrap(), t.fe_demand + t.be_demand);
    }

    #[test]
    fn gateway_delay_is_paid_on_dispatch() {
        let doc = with_workload(FOUR, "  phases: [{rate: 10, duration_s: 10}]\n");
        let r = engine(&doc).run(600.0).unwrap();
        let mut saw_c3 = false;
        let mut saw_c4 = false;
        for t in &r.traces {
            let wire = t.be_start.unwrap() - t.be_dispatch.unwrap();
            match t.backend.unwrap().cluster {
                2 => {
                    saw_c3 = true;
                    assert!(wire >= 0.025 - 1e-12, "{wire}");
                }
                3 => {
                    saw_c4 = true;
                    assert!(wire < 1e-12, "{wire}");
                }
                _ => unreachable!(),
            }
        }
        assert!(saw_c3 && saw_c4);
    }

    #[test]
    fn same_seed_same_run() {
        let doc = with_workload(FOUR, "  arrival: poisson\n  phases: [{rate: 20, duration_s: 60}]\n  payload: {dist: lognormal, mu: 12.5, sigma: 0.5}\n");
        let a = engine(&doc).run(120.0).unwrap();
        let b = engine(&doc).run(120.0).unwrap();
        assert_eq!(a, b);
        let c = engine(&doc.replace("duration_s: 600\n", "duration_s: 600\nseed: 3\n")).run(120.0).unwrap();
        assert_ne!(a.traces, c.traces);
    }

    #[test]
    fn resumed_run_matches_single_run() {
        let doc = with_workload(FOUR, "  arrival: poisson\n  phases: [{rate: 20, duration_s: 100}]\n");
        let whole = engine(&doc).run(200.0).unwrap();
        let mut e = engine(&doc);
        e.run(37.5).unwrap();
        e.run(120.0).unwrap();
        assert_eq!(e.run(200.0).unwrap(), whole);
    }

    #[test]
    fn horizon_checks() {
        let mut e = engine(FOUR);
        assert!(matches!(e.run(601.0), Err(EngineError::UntilBeyondDuration { .. })));
        e.run(10.0).unwrap();
        assert!(matches!(e.run(5.0), Err(EngineError::UntilInPast { .. })));
        assert!(matches!(e.schedule(9.0, EventKind::Arrival), Err(EngineError::ScheduleInPast { .. })));
    }

    #[test]
    fn clock_is_monotone_and_seq_unique() {
        let doc = with_workload(FOUR, "  arrival: poisson\n  phases: [{rate: 20, duration_s: 30}]\n");
        let mut e = engine(&doc);
        e.enable_event_log();
        e.run(60.0).unwrap();
        let log = e.event_log().unwrap();
        assert_eq!(log.len() as u64, e.event_count());
        for w in log.windows(2) {
            assert!(w[0] < w[1]);
        }
        let mut seqs: Vec<u64> = log.iter().map(|ev| ev.seq).collect();
        seqs.sort_unstable();
        seqs.dedup();
        assert_eq!(seqs.len(), log.len());
    }

    #[test]
    fn placement_shares_node_vcpus() {
        let topo = validate(&parse_scenario(FOUR).unwrap()).unwrap();
        let placed = place_replicas(&topo);
        assert!(placed.values().all(|&(_, limit)| limit == 4));
        let dense = FOUR.replace("{C3: 3, C4: 3}", "{C3: 6, C4: 3}");
        let topo = validate(&parse_scenario(&dense).unwrap()).unwrap();
        let limits: Vec<usize> =
            place_replicas(&topo).iter().filter(|(k, _)| k.cluster == 2).map(|(_, &(_, l))| l).collect();
        assert_eq!(limits, vec![2, 2, 4, 4, 2, 2]);
    }

    #[test]
    fn saturated_replica_queues_fifo() {
        let doc = "\
duration_s: 100
clusters: [{name: A, nodes: 1, vcpus_per_node: 1}]
services:
  - {name: fe, stage: frontend, replicas_per_cluster: {A: 1}, demand: {base_ms: 1000, per_kb_ms: 0, reduction: 1}}
workload:
  phases: [{rate: 10, duration_s: 0.3}]
";
        let mut e = engine(doc);
        let r = e.run(100.0).unwrap();
        let starts: Vec<f64> = r.traces.iter().map(|t| t.fe_start.unwrap()).collect();
        assert_eq!(starts, vec![0.0, 1.0, 2.0]);
        assert!(r.traces.iter().all(|t| t.outcome == Outcome::Completed));
        assert_eq!(e.replicas()[0].busy_vcpu_seconds, 3.0);
    }

    #[test]
    fn blackout_drops_and_releases_at_timeout() {
        let doc = with_workload(
            &FOUR.replace("services:", "engine: {lc_mode: lowest_index}\nservices:").replace(
                "replicas_per_cluster: {C1: 2, C2: 2}}",
                "replicas_per_cluster: {C1: 2, C2: 2}, backend_policy: least_connection}",
            ),
            "  phases: [{rate: 20, duration_s: 100}]\n",
        ) + "timeline:\n  - {at_s: 10, action: blackout, params: {cluster: C3, end_s: 50}}\n";
        let mut e = engine(&doc);
        let r = e.run(600.0).unwrap();
        let lost: Vec<&RequestTrace> = r.traces.iter().filter(|t| t.outcome == Outcome::Lost).collect();
        assert!(!lost.is_empty());
        for t in &lost {
            assert_eq!(t.backend.unwrap().cluster, 2);
            // a response leg leaving C3 after onset is dropped too
            assert!(t.be_dispatch.unwrap() >= 9.0 && t.be_dispatch.unwrap() < 50.0);
        }
        assert!(r.traces.iter().all(|t| matches!(t.outcome, Outcome::Completed | Outcome::Lost)));
        for sc in e.sidecars() {
            assert_eq!(sc.total_outstanding(), 0);
        }
        let after: usize = r.traces.iter().filter(|t| t.ingress_in > 60.0 && t.backend.unwrap().cluster == 2).count();
        assert!(after > 0, "dispatches to C3 resume after the blackout");
    }

    #[test]
    fn lc_conservation_and_busy_accounting() {
        let doc = with_workload(
            &FOUR.replace("{C1: 2, C2: 2}}", "{C1: 2, C2: 2}, backend_policy: least_connection}"),
            "  arrival: poisson\n  phases: [{rate: 20, duration_s: 200}]\n  payload: {dist: lognormal, mu: 12.5, sigma: 0.5}\n",
        );
        let mut e = engine(&doc);
        let r = e.run(600.0).unwrap();
        for sc in e.sidecars() {
            for ep in &e.registry().service(ServiceId(1)).mesh_order {
                let (acq, rel) = sc.lc_totals(&ep.key());
                assert_eq!(acq, rel);
            }
            assert_eq!(sc.total_outstanding(), 0);
        }
        let busy: f64 = e.replicas().iter().map(|r| r.busy_vcpu_seconds).sum();
        let demand: f64 = r.traces.iter().map(|t| t.fe_demand + t.be_demand).sum();
        assert!((busy - demand).abs() <= 1e-9 * demand, "{busy} vs {demand}");
        for t in &r.traces {
            let ts = t.timestamps();
            assert!(ts.windows(2).all(|w| w[0] <= w[1]), "{t:?}");
        }
    }
}
