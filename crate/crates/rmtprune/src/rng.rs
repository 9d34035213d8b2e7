//! Seeded random streams.
//!
//! Every random draw in the crate comes from `ChaCha8Rng`, a counter-based
//! generator with a fixed, portable algorithm, so a seed pins results across
//! platforms and releases of this crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a (seed, purpose) pair.
///
/// Uses ChaCha's stream id so that e.g. the noise and the factors of one
/// spiked sample never share draws.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * normal(rng)).collect()
}
