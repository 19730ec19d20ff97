//! Deterministic discrete-event emulator of a gateway-centralized federated
//! multi-cluster cloud.
//!
//! A scenario ([`topology::FederationSpec`]) describes clusters, the
//! impairment matrix enforced at the gateway, a two-stage frontend/backend
//! service, an open-loop image workload and a fault timeline. The
//! [`engine`] executes it in virtual time; [`metrics`] and [`probes`] turn
//! the run into CPU-rate series and RTT matrices.

pub mod cli;
pub mod engine;
pub mod faults;
pub mod mesh;
pub mod metrics;
pub mod netem;
pub mod probes;
pub mod rng;
pub mod topology;
pub mod workload;
