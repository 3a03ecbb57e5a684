//! Named, derivable random streams.
//!
//! Every source of randomness in a run is a ChaCha stream keyed by a base seed, a
//! stream name and a short index path (batch, epoch, example). Keying by position
//! rather than by draw order keeps runs reproducible when work is resumed or
//! parallelised.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive a child seed from `base`, a stream name and an index path.
pub fn derive_seed(base: u64, name: &str, path: &[u64]) -> u64 {
    let mut h = splitmix(base ^ fnv1a(name));
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream(base: u64, name: &str, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, name, path))
}
