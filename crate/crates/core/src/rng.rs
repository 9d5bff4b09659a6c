//! Reproducible random streams.
//!
//! Every random draw in the crate comes from ChaCha8 keyed by a 64-bit seed
//! (`ChaCha8Rng::seed_from_u64`) with a 64-bit stream selector. Work items use
//! distinct streams, so results do not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream-space prefixes keeping independent consumers apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    TrainLoads = 1,
    TestLoads = 2,
    Init = 3,
    Training = 4,
    Sampling = 5,
    Baseline = 6,
    Misc = 7,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}
