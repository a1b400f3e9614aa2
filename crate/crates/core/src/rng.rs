//! Seed derivation. Every random stream in the crate is a ChaCha8 stream
//! selected from a root seed, so components never share draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags keep independent consumers of one root seed apart.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Provider = 1,
    Lexicon = 2,
    Passage = 3,
    Levels = 4,
    Init = 5,
    Batches = 6,
    Generation = 7,
    Permutation = 8,
}

pub fn derived(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng.set_stream(index);
    rng
}
