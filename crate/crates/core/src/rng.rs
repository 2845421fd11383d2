//! Counter-keyed random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream addressed by
//! `(seed, kind, level, step)`, so the draws a temperature level sees during a
//! sweep do not depend on how many draws any other level made, nor on the
//! order in which levels were scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamKind {
    Within = 1,
    Swap = 2,
    Leap = 3,
    Explore = 4,
    Init = 5,
    Scaling = 6,
}

const STEP_BITS: u32 = 40;
const LEVEL_BITS: u32 = 16;

/// Opens the stream for `(seed, kind, level, step)`.
///
/// Levels are taken modulo 2^16 and steps modulo 2^40.
pub fn stream(seed: u64, kind: StreamKind, level: usize, step: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = ((kind as u64) << (STEP_BITS + LEVEL_BITS))
        | (((level as u64) & ((1 << LEVEL_BITS) - 1)) << STEP_BITS)
        | (step & ((1 << STEP_BITS) - 1));
    rng.set_stream(id);
    rng
}
