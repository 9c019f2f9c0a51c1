//! Seed handling. Every stage draws from its own named sub-stream of one
//! 64-bit run seed, so stages can be rerun independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Simulate,
    Train,
    Sample,
    Plan,
    Check,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Simulate => 1,
            Stream::Train => 2,
            Stream::Sample => 3,
            Stream::Plan => 4,
            Stream::Check => 5,
        }
    }
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `stream` of the run seed `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Independent generator for item `index` of a stream; used where work is
/// sharded across threads so results do not depend on scheduling.
pub fn indexed_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(index.wrapping_add(0x5851_F42D))));
    rng.set_stream(stream.id());
    rng
}
