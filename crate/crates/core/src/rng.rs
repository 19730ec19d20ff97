//! Seeded random streams.
//!
//! Every stochastic source in a run (arrivals, payload sizes, each directed
//! link's delay and loss, each balancer's tie-breaks) draws from its own
//! ChaCha8 stream. All streams share the scenario seed and differ only in
//! the ChaCha stream id, so adding traffic to one source never shifts the
//! sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::netem::Site;

/// Identifies one independent random stream within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StreamId {
    Arrivals,
    Payload,
    Balancer(usize),
    LinkDelay(Site, Site),
    LinkLoss(Site, Site),
}

impl StreamId {
    fn code(self) -> u64 {
        fn site(s: Site) -> u64 {
            match s {
                Site::Cluster(i) => i as u64,
                Site::Gateway => 0xffff,
            }
        }
        match self {
            StreamId::Arrivals => 1,
            StreamId::Payload => 2,
            StreamId::Balancer(k) => 0x1_0000_0000 + k as u64,
            StreamId::LinkDelay(a, b) => 0x2_0000_0000 + ((site(a) << 16 | site(b)) << 1),
            StreamId::LinkLoss(a, b) => 0x2_0000_0000 + ((site(a) << 16 | site(b)) << 1) + 1,
        }
    }
}

/// Deterministic generator for `(seed, stream)`.
pub fn stream(seed: u64, id: StreamId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id.code());
    rng
}
