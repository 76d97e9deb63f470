//! Seeded randomness.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), a portable
//! stream cipher generator whose output is identical on every platform. A
//! master seed is expanded into independent streams by purpose so that, for
//! example, the shuffle order of epoch 3 does not depend on how many dropout
//! masks were drawn in epoch 2.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers for the different consumers of a master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split,
    Cluster,
    Init,
    Shuffle,
    Dropout,
    Masking,
    Aspect,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Split => 1,
            Stream::Cluster => 2,
            Stream::Init => 3,
            Stream::Shuffle => 4,
            Stream::Dropout => 5,
            Stream::Masking => 6,
            Stream::Aspect => 7,
        }
    }
}

/// Generator for `(seed, stream, a, b)`. `a` and `b` index sub-streams such
/// as `(epoch, sample)`.
pub fn rng_for(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.tag() << 56 ^ a.rotate_left(24) ^ b);
    rng
}

/// Derives a child seed, e.g. one per aspect from a master seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    rng_for(seed, Stream::Aspect, index, 0).next_u64()
}
