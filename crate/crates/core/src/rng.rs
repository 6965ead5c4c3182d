//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed, a purpose tag and up to two coordinates (for example round and
//! client id). Streams never share state, so results do not depend on the
//! order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags. The discriminants are part of the reproducibility contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    InitHidden = 1,
    InitReadout = 2,
    Partition = 3,
    ClientRound = 4,
    Synthetic = 5,
    EvalSubsample = 6,
    CurveFind = 7,
    DropoutSubset = 8,
    TestProjection = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of `(seed, purpose, a, b)` used as the stream key.
pub fn stream_key(seed: u64, purpose: Purpose, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, purpose, a, b))
}
