//! Deterministic RNG streams.
//!
//! Every random decision is drawn from a ChaCha stream derived from the run
//! seed and a stream id. Training step `t` always uses stream `t`, so a run
//! resumed from a checkpoint consumes exactly the same randomness as the
//! original run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream reserved for parameter initialization.
pub const STREAM_INIT: u64 = u64::MAX;
/// Stream reserved for the synthetic dataset generator.
pub const STREAM_SYNTH: u64 = u64::MAX - 1;
/// Stream reserved for probe training.
pub const STREAM_PROBE: u64 = u64::MAX - 2;

pub fn for_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG for one training step: masking, Gumbel noise, and distractor
/// sampling draw from this stream in a fixed order.
pub fn for_step(seed: u64, step: u64) -> ChaCha8Rng {
    for_stream(seed, step)
}

const DATA_STREAM_FLAG: u64 = 1 << 63;

/// RNG for assembling step `t`'s batch (entry choice, crop offsets), kept
/// separate from the in-step stream.
pub fn for_data_step(seed: u64, step: u64) -> ChaCha8Rng {
    for_stream(seed, step | DATA_STREAM_FLAG)
}
