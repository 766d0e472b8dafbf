//! Deterministic PRNG streams.
//!
//! A run owns a single root seed; every consumer (data shuffling, parameter
//! init, dropout, sub-sampling) draws from its own named stream so that
//! enabling or disabling one consumer does not perturb the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable stream identifiers. The numeric value is part of the determinism
/// contract: reordering these would change every seeded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Dropout = 3,
    Shuffle = 4,
    Subsample = 5,
    Synth = 6,
    HeadInit = 7,
    GradCheck = 8,
}

/// An independent ChaCha stream derived from `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A sub-stream with an extra index, e.g. one dropout mask per layer per step.
pub fn substream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_independent_and_deterministic() {
        let mut r1 = stream_rng(7, Stream::Init);
        let mut r2 = stream_rng(7, Stream::Init);
        let mut r3 = stream_rng(7, Stream::Dropout);
        let x1 = r1.next_u64();
        assert_eq!(x1, r2.next_u64());
        assert_ne!(x1, r3.next_u64());
    }
}
