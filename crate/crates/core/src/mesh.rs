//! Service registry and load balancing.
//!
//! The ingress balancer at the gateway spreads client requests over every
//! frontend replica; each frontend replica then owns a sidecar-style
//! [`BalancerState`] for choosing a backend replica.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeshError {
    #[error("no healthy endpoint available")]
    NoHealthyEndpoint,
    #[error("outstanding count underflow on {0}")]
    Underflow(EndpointKey),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServiceId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EndpointKey {
    pub service: ServiceId,
    pub cluster: usize,
    pub replica: usize,
}

impl std::fmt::Display for EndpointKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "service#{}/cluster#{}/replica#{}", self.service.0, self.cluster, self.replica)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub service: ServiceId,
    pub cluster: usize,
    pub replica: usize,
    pub healthy: bool,
}

impl Endpoint {
    pub fn new(service: ServiceId, cluster: usize, replica: usize) -> Self {
        Endpoint { service, cluster, replica, healthy: true }
    }

    pub fn key(&self) -> EndpointKey {
        EndpointKey { service: self.service, cluster: self.cluster, replica: self.replica }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    RoundRobin,
    LeastConnection,
}

/// How least-connection resolves its choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LcMode {
    /// Exact minimum, ties to the lowest list index.
    LowestIndex,
    /// Exact minimum, ties broken uniformly at random.
    #[default]
    RandomTie,
    /// Two distinct healthy candidates drawn at random, fewer outstanding wins.
    PowerOfTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcDelta {
    Acquire,
    Release,
}

/// Mutable routing state of one balancer.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancerState {
    pub policy: Policy,
    pub lc_mode: LcMode,
    rr_cursor: usize,
    outstanding: BTreeMap<EndpointKey, u32>,
    acquired: BTreeMap<EndpointKey, u64>,
    released: BTreeMap<EndpointKey, u64>,
    rng: ChaCha8Rng,
}

impl BalancerState {
    pub fn new(policy: Policy, lc_mode: LcMode, rng: ChaCha8Rng) -> Self {
        BalancerState {
            policy,
            lc_mode,
            rr_cursor: 0,
            outstanding: BTreeMap::new(),
            acquired: BTreeMap::new(),
            released: BTreeMap::new(),
            rng,
        }
    }

    pub fn rr_cursor(&self) -> usize {
        self.rr_cursor
    }

    pub fn outstanding(&self, key: &EndpointKey) -> u32 {
        self.outstanding.get(key).copied().unwrap_or(0)
    }

    pub fn total_outstanding(&self) -> u32 {
        self.outstanding.values().sum()
    }

    /// `(acquired, released)` totals for one endpoint over the state's life.
    pub fn lc_totals(&self, key: &EndpointKey) -> (u64, u64) {
        (self.acquired.get(key).copied().unwrap_or(0), self.released.get(key).copied().unwrap_or(0))
    }

    pub fn outstanding_by_endpoint(&self) -> impl Iterator<Item = (&EndpointKey, &u32)> {
        self.outstanding.iter()
    }

    /// Pick according to `self.policy`; returns an index into `endpoints`.
    pub fn pick(&mut self, endpoints: &[Endpoint]) -> Result<usize, MeshError> {
        match self.policy {
            Policy::RoundRobin => self.pick_rr(endpoints),
            Policy::LeastConnection => self.pick_lc(endpoints),
        }
    }

    /// Next healthy endpoint in cyclic order from the cursor. Unhealthy
    /// endpoints are skipped without consuming a turn.
    pub fn pick_rr(&mut self, endpoints: &[Endpoint]) -> Result<usize, MeshError> {
        let n = endpoints.len();
        if n == 0 {
            return Err(MeshError::NoHealthyEndpoint);
        }
        let start = self.rr_cursor % n;
        let idx = (0..n)
            .map(|off| (start + off) % n)
            .find(|&i| endpoints[i].healthy)
            .ok_or(MeshError::NoHealthyEndpoint)?;
        self.rr_cursor = (idx + 1) % n;
        Ok(idx)
    }

    /// Healthy endpoint with the fewest outstanding requests.
    pub fn pick_lc(&mut self, endpoints: &[Endpoint]) -> Result<usize, MeshError> {
        let healthy: Vec<usize> = (0..endpoints.len()).filter(|&i| endpoints[i].healthy).collect();
        if healthy.is_empty() {
            return Err(MeshError::NoHealthyEndpoint);
        }
        let counts: Vec<u32> = endpoints.iter().map(|e| self.outstanding(&e.key())).collect();
        let count = |i: usize| counts[i];
        match self.lc_mode {
            LcMode::LowestIndex => Ok(*healthy.iter().min_by_key(|&&i| (count(i), i)).expect("non-empty")),
            LcMode::RandomTie => {
                let min = healthy.iter().map(|&i| count(i)).min().expect("non-empty");
                let tied: Vec<usize> = healthy.into_iter().filter(|&i| count(i) == min).collect();
                Ok(if tied.len() == 1 { tied[0] } else { tied[self.rng.random_range(0..tied.len())] })
            }
            LcMode::PowerOfTwo => {
                if healthy.len() == 1 {
                    return Ok(healthy[0]);
                }
                let a = self.rng.random_range(0..healthy.len());
                let mut b = self.rng.random_range(0..healthy.len() - 1);
                if b >= a {
                    b += 1;
                }
                let (a, b) = (healthy[a], healthy[b]);
                Ok(if count(b) < count(a) { b } else { a })
            }
        }
    }

    /// Outstanding-request bookkeeping: acquire at dispatch, release at
    /// response receipt or timeout.
    pub fn lc_update(&mut self, key: EndpointKey, delta: LcDelta) -> Result<(), MeshError> {
        match delta {
            LcDelta::Acquire => {
                *self.outstanding.entry(key).or_insert(0) += 1;
                *self.acquired.entry(key).or_insert(0) += 1;
            }
            LcDelta::Release => {
                let c = self.outstanding.get_mut(&key).filter(|c| **c > 0).ok_or(MeshError::Underflow(key))?;
                *c -= 1;
                if *c == 0 {
                    self.outstanding.remove(&key);
                }
                *self.released.entry(key).or_insert(0) += 1;
            }
        }
        Ok(())
    }
}

/// Gateway ingress: round robin over all frontend replicas.
pub fn ingress_route(state: &mut BalancerState, edge_frontends: &[Endpoint]) -> Result<usize, MeshError> {
    state.pick_rr(edge_frontends)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceEntry {
    pub name: String,
    /// Cluster-major: all replicas of the first hosting cluster, then the next.
    pub ingress_order: Vec<Endpoint>,
    /// Replica-major across clusters (c0r0, c1r0, c0r1, ...), so any prefix
    /// of a round-robin cycle is spread evenly over clusters.
    pub mesh_order: Vec<Endpoint>,
}

/// All endpoints of all services, with health flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Registry {
    services: Vec<ServiceEntry>,
}

impl Registry {
    /// `placements[s]` lists `(cluster, replica_count)` in cluster order.
    pub fn new(services: &[(String, Vec<(usize, usize)>)]) -> Self {
        let services = services
            .iter()
            .enumerate()
            .map(|(s, (name, placement))| {
                let id = ServiceId(s);
                let ingress_order: Vec<Endpoint> = placement
                    .iter()
                    .flat_map(|&(c, n)| (0..n).map(move |r| Endpoint::new(id, c, r)))
                    .collect();
                let max = placement.iter().map(|&(_, n)| n).max().unwrap_or(0);
                let mesh_order: Vec<Endpoint> = (0..max)
                    .flat_map(|r| placement.iter().filter(move |&&(_, n)| r < n).map(move |&(c, _)| Endpoint::new(id, c, r)))
                    .collect();
                ServiceEntry { name: name.clone(), ingress_order, mesh_order }
            })
            .collect();
        Registry { services }
    }

    pub fn service(&self, id: ServiceId) -> &ServiceEntry {
        &self.services[id.0]
    }

    pub fn services(&self) -> &[ServiceEntry] {
        &self.services
    }

    pub fn endpoint(&self, key: EndpointKey) -> Option<&Endpoint> {
        self.services.get(key.service.0)?.ingress_order.iter().find(|e| e.key() == key)
    }

    pub fn set_health(&mut self, key: EndpointKey, healthy: bool) -> Result<(), MeshError> {
        let svc = self.services.get_mut(key.service.0).ok_or(MeshError::UnknownEndpoint(key))?;
        let mut found = false;
        for e in svc.ingress_order.iter_mut().chain(svc.mesh_order.iter_mut()) {
            if e.key() == key {
                e.healthy = healthy;
                found = true;
            }
        }
        if found { Ok(()) } else { Err(MeshError::UnknownEndpoint(key)) }
    }
}
