//! Seedable, splittable randomness.
//!
//! Every stochastic routine takes an explicit `&mut LdgRng`; nothing reads a
//! global generator, so a run is reproducible from its seed alone.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type LdgRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> LdgRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> LdgRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child generator derived from (and advancing) `parent`.
pub fn split(parent: &mut LdgRng) -> LdgRng {
    let seed = parent.next_u64();
    let stream = parent.next_u64();
    rng_stream(seed, stream)
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}
