//! Open-loop load generation for the two-stage image pipeline.
//!
//! Arrivals are produced from a dedicated random stream and never look at
//! responses. Per-stage CPU demand is linear in the bytes a stage receives;
//! the frontend forwards `payload * reduction` bytes to the backend.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("empirical payload list is empty")]
    EmptyEmpiricalList,
    #[error("invalid payload distribution: {0}")]
    BadDistribution(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    #[default]
    Constant,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    /// Requests per second.
    pub rate: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmpiricalMode {
    #[default]
    Uniform,
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayloadSpec {
    Constant { bytes: u64 },
    Lognormal { mu: f64, sigma: f64 },
    Empirical {
        sizes: Vec<u64>,
        #[serde(default)]
        mode: EmpiricalMode,
    },
}

impl Default for PayloadSpec {
    fn default() -> Self {
        PayloadSpec::Constant { bytes: DEFAULT_PAYLOAD_BYTES }
    }
}

pub const DEFAULT_PAYLOAD_BYTES: u64 = 300_000;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub arrival: ArrivalKind,
    #[serde(default)]
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub payload: PayloadSpec,
}

impl WorkloadSpec {
    /// End time of the last phase.
    pub fn horizon(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }

    /// `(start, end, rate)` for each phase.
    pub fn phase_windows(&self) -> Vec<(f64, f64, f64)> {
        let mut start = 0.0;
        self.phases
            .iter()
            .map(|p| {
                let w = (start, start + p.duration_s, p.rate);
                start += p.duration_s;
                w
            })
            .collect()
    }
}

/// Service demand profile as written in the scenario document
/// (milliseconds and kilobytes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    pub base_ms: f64,
    pub per_kb_ms: f64,
    pub reduction: f64,
}

impl DemandSpec {
    // Calibration constants, not measured values. The frontend stays cheaper
    // than the backend for payloads below ~18 MB and 20 req/s stays far
    // below datacenter capacity.
    pub const FRONTEND_DEFAULT: DemandSpec = DemandSpec { base_ms: 20.0, per_kb_ms: 0.01, reduction: 1.0 / 3.0 };
    pub const BACKEND_DEFAULT: DemandSpec = DemandSpec { base_ms: 80.0, per_kb_ms: 0.02, reduction: 1.0 };

    pub fn profile(&self) -> StageProfile {
        StageProfile {
            base_demand: self.base_ms / 1e3,
            per_byte_demand: self.per_kb_ms / 1e6,
            reduction_factor: self.reduction,
        }
    }
}

/// Demand model of one stage in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageProfile {
    /// vCPU-seconds per request.
    pub base_demand: f64,
    /// vCPU-seconds per input byte.
    pub per_byte_demand: f64,
    /// Output bytes / input bytes.
    pub reduction_factor: f64,
}

impl StageProfile {
    pub fn output_bytes(&self, input_bytes: u64) -> u64 {
        (input_bytes as f64 * self.reduction_factor).round() as u64
    }
}

/// vCPU-seconds needed to process `input_bytes`.
pub fn service_demand(profile: &StageProfile, input_bytes: u64) -> f64 {
    profile.base_demand + profile.per_byte_demand * input_bytes as f64
}

fn phase_at(spec: &WorkloadSpec, t: f64) -> Option<(usize, f64, f64, f64)> {
    spec.phase_windows()
        .into_iter()
        .enumerate()
        .find(|&(_, (start, end, _))| t >= start && t < end)
        .map(|(i, (s, e, r))| (i, s, e, r))
}

/// Next arrival strictly after `now`, or `None` once the last phase is over.
///
/// Constant arrivals step by `1/rate`; Poisson arrivals draw `Exp(rate)`.
/// A step that crosses a phase boundary restarts at the next phase with
/// positive rate: constant arrivals fire at that phase's start, Poisson
/// arrivals redraw from it (valid by memorylessness). Rate-0 phases produce
/// nothing.
pub fn next_arrival<R: Rng + ?Sized>(spec: &WorkloadSpec, now: f64, rng: &mut R) -> Option<f64> {
    let windows = spec.phase_windows();
    let (mut idx, _, _, _) = phase_at(spec, now)?;
    let mut from = now;
    loop {
        let (_, end, rate) = windows[idx];
        if rate > 0.0 {
            let step = match spec.arrival {
                ArrivalKind::Constant => 1.0 / rate,
                ArrivalKind::Poisson => Exp::new(rate).expect("rate > 0").sample(rng),
            };
            let t = from + step;
            if t < end {
                return Some(t);
            }
        }
        idx += 1;
        let &(start, end, rate) = windows.get(idx)?;
        from = start;
        if spec.arrival == ArrivalKind::Constant && rate > 0.0 && start < end {
            return Some(start);
        }
    }
}

/// Stateful arrival source used by the engine.
///
/// Constant-rate phases are generated by index (`start + k/rate`) rather
/// than by accumulation, so a phase of rate `r` and duration `d` yields
/// exactly `ceil(r*d)` arrivals at `t < end` (that is `r*d` when it is an
/// integer) with no floating-point drift.
#[derive(Debug, Clone)]
pub struct ArrivalGenerator {
    spec: WorkloadSpec,
    windows: Vec<(f64, f64, f64)>,
    phase: usize,
    k: u64,
    last: f64,
}

impl ArrivalGenerator {
    pub fn new(spec: &WorkloadSpec) -> Self {
        ArrivalGenerator { spec: spec.clone(), windows: spec.phase_windows(), phase: 0, k: 0, last: 0.0 }
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<f64> {
        match self.spec.arrival {
            ArrivalKind::Constant => loop {
                let &(start, end, rate) = self.windows.get(self.phase)?;
                if rate > 0.0 {
                    let t = start + self.k as f64 / rate;
                    if t < end {
                        self.k += 1;
                        return Some(t);
                    }
                }
                self.phase += 1;
                self.k = 0;
            },
            ArrivalKind::Poisson => {
                let t = next_arrival(&self.spec, self.last, rng)?;
                self.last = t;
                Some(t)
            }
        }
    }
}

/// Payload size source; holds the cursor for cycling empirical lists.
#[derive(Debug, Clone)]
pub struct PayloadSampler {
    spec: PayloadSpec,
    dist: Option<LogNormal<f64>>,
    cursor: usize,
}

impl PayloadSampler {
    pub fn new(spec: &PayloadSpec) -> Result<Self, WorkloadError> {
        let dist = match spec {
            PayloadSpec::Lognormal { mu, sigma } => {
                Some(LogNormal::new(*mu, *sigma).map_err(|e| WorkloadError::BadDistribution(e.to_string()))?)
            }
            PayloadSpec::Empirical { sizes, .. } if sizes.is_empty() => return Err(WorkloadError::EmptyEmpiricalList),
            _ => None,
        };
        Ok(PayloadSampler { spec: spec.clone(), dist, cursor: 0 })
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> u64 {
        match &self.spec {
            PayloadSpec::Constant { bytes } => *bytes,
            PayloadSpec::Lognormal { .. } => self.dist.as_ref().expect("built in new").sample(rng).round() as u64,
            PayloadSpec::Empirical { sizes, mode: EmpiricalMode::Uniform } => sizes[rng.random_range(0..sizes.len())],
            PayloadSpec::Empirical { sizes, mode: EmpiricalMode::Cycle } => {
                let v = sizes[self.cursor % sizes.len()];
                self.cursor += 1;
                v
            }
        }
    }
}

/// One-shot convenience over [`PayloadSampler`].
pub fn sample_payload<R: Rng + ?Sized>(spec: &PayloadSpec, rng: &mut R) -> Result<u64, WorkloadError> {
    Ok(PayloadSampler::new(spec)?.sample(rng))
}
