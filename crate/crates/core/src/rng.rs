//! Deterministic seed splitting.
//!
//! Every consumer of randomness (initialization, shuffling, latent noise,
//! dropout, noise injection) derives its own generator from the root seed
//! and a small coordinate tuple, so no generator state has to be carried
//! across epochs or serialized into checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Consumers of the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Latent = 3,
    Dropout = 4,
    Noise = 5,
    Synth = 6,
    Verify = 7,
    Stage2 = 8,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a stream tag and coordinates into a fresh generator.
pub fn derive(seed: u64, stream: Stream, coords: &[u64]) -> Rng {
    let mut h = splitmix(seed ^ (stream as u64).rotate_left(32));
    for &c in coords {
        h = splitmix(h ^ c);
    }
    Rng::seed_from_u64(h)
}
