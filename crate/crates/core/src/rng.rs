//! Seeded random streams.
//!
//! One master seed fans out into independent ChaCha streams, one per named
//! purpose, so drawing more from one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Gumbel,
    Crop,
    Tps,
    Eot,
    Paste,
    Batch,
    Baseline,
    Eval,
    Train,
    Split,
    Scene,
    Augment,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Gumbel => 2,
            Stream::Crop => 3,
            Stream::Tps => 4,
            Stream::Eot => 5,
            Stream::Paste => 6,
            Stream::Batch => 7,
            Stream::Baseline => 8,
            Stream::Eval => 9,
            Stream::Train => 10,
            Stream::Split => 11,
            Stream::Scene => 12,
            Stream::Augment => 13,
        }
    }
}

/// Stream `which` of `seed`.
pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Per-item stream, e.g. one per scene index.
pub fn indexed(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which.id() << 32 | (index & 0xFFFF_FFFF));
    rng
}
