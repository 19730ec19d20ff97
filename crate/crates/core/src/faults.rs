//! Timed fault and reconfiguration timeline.
//!
//! Scenario entries (`{at_s, action, params}`) compile into a time-ordered
//! list of [`TimedAction`]s, which the engine applies as `timeline_apply`
//! events. A blackout becomes a begin/end pair on the classifier's blackout
//! overlay; `set_link` installs one directed rule; `set_health` flips the
//! health flag of one replica or of every replica of a service in a cluster.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{EndpointKey, MeshError, Registry, ServiceId};
use crate::netem::{ClassifierTable, ImpairmentRule, JitterSpec, LossSpec, Site, TrafficClass};
use crate::topology::FederationSpec;

/// Name accepted wherever a site is expected to denote the gateway itself.
pub const GATEWAY: &str = "gateway";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimelineAction {
    SetLink {
        src: String,
        dst: String,
        #[serde(default)]
        delay_ms: f64,
        #[serde(default)]
        jitter: JitterSpec,
        #[serde(default)]
        loss_p: f64,
        #[serde(default)]
        loss_corr: f64,
        #[serde(default)]
        class: TrafficClass,
    },
    Blackout {
        cluster: String,
        end_s: f64,
    },
    SetHealth {
        service: String,
        cluster: String,
        /// All replicas of the service in `cluster` when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        replica: Option<usize>,
        healthy: bool,
    },
}

/// One scenario timeline entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub at_s: f64,
    #[serde(flatten)]
    pub action: TimelineAction,
}

/// Resolved action ready for the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SetLink(ImpairmentRule),
    BlackoutBegin(usize),
    BlackoutEnd(usize),
    SetHealth { endpoints: Vec<EndpointKey>, healthy: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedAction {
    pub at: f64,
    /// Index of the originating scenario entry.
    pub source: usize,
    pub action: Action,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineErrorKind {
    #[error("references unknown cluster {0:?}")]
    UnknownCluster(String),
    #[error("references unknown service {0:?}")]
    UnknownService(String),
    #[error("replica {replica} out of range: {service} has {count} replicas in {cluster}")]
    ReplicaOutOfRange { service: String, cluster: String, replica: usize, count: u32 },
    #[error("blackout overlaps an earlier blackout of {0:?}")]
    OverlappingBlackout(String),
    #[error("invalid rule: {0}")]
    BadRule(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("timeline[{index}] {kind}")]
pub struct TimelineError {
    pub index: usize,
    pub kind: TimelineErrorKind,
}

fn site(name: &str, clusters: &BTreeMap<String, usize>) -> Result<Site, TimelineErrorKind> {
    if name == GATEWAY {
        return Ok(Site::Gateway);
    }
    clusters.get(name).map(|&c| Site::Cluster(c)).ok_or_else(|| TimelineErrorKind::UnknownCluster(name.to_string()))
}

fn cluster(name: &str, clusters: &BTreeMap<String, usize>) -> Result<usize, TimelineErrorKind> {
    clusters.get(name).copied().ok_or_else(|| TimelineErrorKind::UnknownCluster(name.to_string()))
}

fn resolve(
    ev: &TimelineEvent,
    spec: &FederationSpec,
    clusters: &BTreeMap<String, usize>,
) -> Result<Vec<(f64, Action)>, TimelineErrorKind> {
    Ok(match &ev.action {
        TimelineAction::SetLink { src, dst, delay_ms, jitter, loss_p, loss_corr, class } => {
            let rule = ImpairmentRule {
                src: site(src, clusters)?,
                dst: site(dst, clusters)?,
                delay_ms: *delay_ms,
                jitter: *jitter,
                loss: LossSpec { p: *loss_p, correlation: *loss_corr },
                scope: *class,
            };
            rule.check().map_err(TimelineErrorKind::BadRule)?;
            vec![(ev.at_s, Action::SetLink(rule))]
        }
        TimelineAction::Blackout { cluster: name, end_s } => {
            let c = cluster(name, clusters)?;
            vec![(ev.at_s, Action::BlackoutBegin(c)), (*end_s, Action::BlackoutEnd(c))]
        }
        TimelineAction::SetHealth { service, cluster: cname, replica, healthy } => {
            let s = spec
                .services
                .iter()
                .position(|x| &x.name == service)
                .ok_or_else(|| TimelineErrorKind::UnknownService(service.clone()))?;
            let c = cluster(cname, clusters)?;
            let count = spec.services[s].replicas_per_cluster.get(cname).copied().unwrap_or(0);
            let replicas: Vec<usize> = match replica {
                Some(r) if (*r as u64) < count as u64 => vec![*r],
                Some(r) => {
                    return Err(TimelineErrorKind::ReplicaOutOfRange {
                        service: service.clone(),
                        cluster: cname.clone(),
                        replica: *r,
                        count,
                    })
                }
                None => (0..count as usize).collect(),
            };
            let endpoints = replicas.into_iter().map(|r| EndpointKey { service: ServiceId(s), cluster: c, replica: r }).collect();
            vec![(ev.at_s, Action::SetHealth { endpoints, healthy: *healthy })]
        }
    })
}

/// Expand and order a scenario timeline.
///
/// Ties in time keep declaration order, except that a blackout end sorts
/// before anything else at the same instant so back-to-back windows on one
/// cluster are not mistaken for overlap.
pub fn compile_timeline(
    events: &[TimelineEvent],
    spec: &FederationSpec,
    clusters: &BTreeMap<String, usize>,
) -> Result<Vec<TimedAction>, TimelineError> {
    let mut out = Vec::new();
    for (index, ev) in events.iter().enumerate() {
        for (at, action) in resolve(ev, spec, clusters).map_err(|kind| TimelineError { index, kind })? {
            out.push(TimedAction { at, source: index, action });
        }
    }
    out.sort_by(|a, b| {
        let rank = |x: &TimedAction| !matches!(x.action, Action::BlackoutEnd(_));
        a.at.total_cmp(&b.at).then(rank(a).cmp(&rank(b)))
    });

    let mut active: BTreeMap<usize, usize> = BTreeMap::new();
    for ta in &out {
        match ta.action {
            Action::BlackoutBegin(c) => {
                if active.insert(c, ta.source).is_some() {
                    let name = spec.clusters[c].name.clone();
                    return Err(TimelineError { index: ta.source, kind: TimelineErrorKind::OverlappingBlackout(name) });
                }
            }
            Action::BlackoutEnd(c) => {
                active.remove(&c);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Apply one action to live engine state. Re-applying is a no-op.
pub fn apply(action: &Action, netem: &mut ClassifierTable, registry: &mut Registry) -> Result<(), MeshError> {
    match action {
        Action::SetLink(rule) => netem.install(*rule),
        Action::BlackoutBegin(c) => netem.set_blackout(*c, true),
        Action::BlackoutEnd(c) => netem.set_blackout(*c, false),
        Action::SetHealth { endpoints, healthy } => {
            for key in endpoints {
                registry.set_health(*key, *healthy)?;
            }
        }
    }
    Ok(())
}
