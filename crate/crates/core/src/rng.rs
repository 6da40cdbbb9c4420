//! Deterministic random-stream derivation.
//!
//! Every random draw in a run comes from a ChaCha generator whose seed mixes
//! the master seed with a list of integer tags (client id, round, purpose).
//! Results therefore cannot depend on thread scheduling: a worker derives its
//! stream from what it is computing, not from when it runs.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Tags separating unrelated streams drawn from the same (seed, client, round).
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const MINIBATCH: u64 = 2;
    pub const ELBO_NOISE: u64 = 3;
    pub const EMBED: u64 = 4;
    pub const CLIENT_SUBSET: u64 = 5;
    pub const WEIGHT_INIT: u64 = 6;
    pub const DATA: u64 = 7;
    pub const RETRAIN: u64 = 8;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed and tag list into a single stream seed.
pub fn stream_seed(master: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(master);
    for &t in tags {
        acc = splitmix64(acc ^ splitmix64(t));
    }
    acc
}

/// Seeded generator for the given (master, tags) stream.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, tags))
}

/// Vector of iid standard-normal draws.
pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Array1<f64> {
    Array1::from_iter((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}
