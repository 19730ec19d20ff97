//! Gateway impairment engine.
//!
//! Mirrors a classful qdisc with per-pair filters: every message crossing the
//! gateway is classified by `(src, dst, class)` to exactly one
//! [`ImpairmentRule`], whose delay, jitter and loss are then sampled from the
//! link's own random streams. Control traffic (scrapes, commands between the
//! gateway and the clusters) only ever matches rules scoped to the control
//! class, so data-link impairments and blackouts never touch it.
//!
//! Impairments apply per application message, not per packet.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One end of a gateway path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Cluster(usize),
    Gateway,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Cluster(i) => write!(f, "cluster#{i}"),
            Site::Gateway => f.write_str("gateway"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    #[default]
    Data,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterDist {
    #[default]
    None,
    Uniform,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterSpec {
    #[serde(default)]
    pub dist: JitterDist,
    #[serde(default)]
    pub scale_ms: f64,
}

impl JitterSpec {
    pub const NONE: JitterSpec = JitterSpec { dist: JitterDist::None, scale_ms: 0.0 };

    pub fn is_none(&self) -> bool {
        self.dist == JitterDist::None || self.scale_ms == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub correlation: f64,
}

impl LossSpec {
    pub const NONE: LossSpec = LossSpec { p: 0.0, correlation: 0.0 };
    pub const TOTAL: LossSpec = LossSpec { p: 1.0, correlation: 0.0 };
}

/// Netem configuration of one directed path for one traffic class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpairmentRule {
    pub src: Site,
    pub dst: Site,
    pub delay_ms: f64,
    pub jitter: JitterSpec,
    pub loss: LossSpec,
    pub scope: TrafficClass,
}

impl ImpairmentRule {
    /// The pass-through rule every unmatched lookup resolves to.
    pub fn unimpaired(src: Site, dst: Site, scope: TrafficClass) -> Self {
        ImpairmentRule { src, dst, delay_ms: 0.0, jitter: JitterSpec::NONE, loss: LossSpec::NONE, scope }
    }

    pub fn is_unimpaired(&self) -> bool {
        self.delay_ms == 0.0 && self.jitter.is_none() && self.loss.p == 0.0
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.delay_ms >= 0.0 && self.delay_ms.is_finite()) {
            return Err(format!("delay {} ms must be finite and >= 0", self.delay_ms));
        }
        if !(self.jitter.scale_ms >= 0.0 && self.jitter.scale_ms.is_finite()) {
            return Err(format!("jitter scale {} ms must be finite and >= 0", self.jitter.scale_ms));
        }
        if !(0.0..=1.0).contains(&self.loss.p) {
            return Err(format!("loss probability {} outside [0, 1]", self.loss.p));
        }
        if !(0.0..=1.0).contains(&self.loss.correlation) {
            return Err(format!("loss correlation {} outside [0, 1]", self.loss.correlation));
        }
        Ok(())
    }
}

type RuleKey = (Site, Site, TrafficClass);

/// Total `(src, dst, class) -> rule` lookup.
///
/// Blackouts are kept as an overlay rather than written into the rule map:
/// while a cluster is blacked out every data-class lookup touching it returns
/// the configured rule with loss forced to 1. Lifting the blackout therefore
/// restores exactly the rules that were in force, including any `set_link`
/// applied in the meantime, and overlapping blackouts on different clusters
/// compose.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassifierTable {
    rules: BTreeMap<RuleKey, ImpairmentRule>,
    blackouts: BTreeSet<usize>,
}

impl ClassifierTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Resolve a message to its rule. Never fails.
    pub fn classify(&self, src: Site, dst: Site, class: TrafficClass) -> ImpairmentRule {
        let mut rule = self
            .rules
            .get(&(src, dst, class))
            .copied()
            .unwrap_or_else(|| ImpairmentRule::unimpaired(src, dst, class));
        if class == TrafficClass::Data && (self.is_blacked_out(src) || self.is_blacked_out(dst)) {
            rule.loss = LossSpec::TOTAL;
        }
        rule
    }

    /// Explicitly configured rule, ignoring blackouts and defaults.
    pub fn configured(&self, src: Site, dst: Site, class: TrafficClass) -> Option<&ImpairmentRule> {
        self.rules.get(&(src, dst, class))
    }

    /// New table with `rule` inserted or replacing the rule for its key.
    pub fn update_rule(&self, rule: ImpairmentRule) -> ClassifierTable {
        let mut next = self.clone();
        next.install(rule);
        next
    }

    pub(crate) fn install(&mut self, rule: ImpairmentRule) {
        let key = (rule.src, rule.dst, rule.scope);
        if rule.is_unimpaired() {
            self.rules.remove(&key);
        } else {
            self.rules.insert(key, rule);
        }
    }

    pub fn with_blackout(&self, cluster: usize) -> ClassifierTable {
        let mut next = self.clone();
        next.blackouts.insert(cluster);
        next
    }

    pub fn without_blackout(&self, cluster: usize) -> ClassifierTable {
        let mut next = self.clone();
        next.blackouts.remove(&cluster);
        next
    }

    pub(crate) fn set_blackout(&mut self, cluster: usize, active: bool) {
        if active {
            self.blackouts.insert(cluster);
        } else {
            self.blackouts.remove(&cluster);
        }
    }

    pub fn is_blacked_out(&self, site: Site) -> bool {
        matches!(site, Site::Cluster(c) if self.blackouts.contains(&c))
    }

    pub fn rules(&self) -> impl Iterator<Item = &ImpairmentRule> {
        self.rules.values()
    }
}

/// Delay in milliseconds for one message: `max(0, delay + jitter)`.
///
/// Negative draws clamp to zero as tc-netem does, which biases the mean
/// upward when the jitter scale is comparable to the delay.
pub fn sample_delay<R: Rng + ?Sized>(rule: &ImpairmentRule, rng: &mut R) -> f64 {
    let scale = rule.jitter.scale_ms;
    let jitter = match rule.jitter.dist {
        _ if scale == 0.0 => 0.0,
        JitterDist::None => 0.0,
        JitterDist::Uniform => rng.random_range(-scale..=scale),
        JitterDist::Normal => Normal::new(0.0, scale).expect("scale validated >= 0").sample(rng),
    };
    (rule.delay_ms + jitter).max(0.0)
}

/// Correlated-loss memory of one link: the previous composite uniform.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossState {
    last: Option<f64>,
}

/// Decide whether one message is dropped.
///
/// Uses the composite-uniform scheme `u = c*u_prev + (1-c)*u_new`, dropping
/// when `u < p`. With `c = 0` this is i.i.d. Bernoulli(p). A fresh uniform is
/// drawn on every call so the stream advances identically whatever `p` is.
pub fn sample_loss<R: Rng + ?Sized>(rule: &ImpairmentRule, rng: &mut R, state: &mut LossState) -> bool {
    let fresh: f64 = rng.random();
    let c = rule.loss.correlation;
    let u = match state.last {
        Some(prev) => c * prev + (1.0 - c) * fresh,
        None => fresh,
    };
    state.last = Some(u);
    u < rule.loss.p
}
