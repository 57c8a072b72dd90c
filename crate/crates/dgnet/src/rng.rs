//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! one run seed, so adding or removing a consumer never shifts the draws of
//! another (network weights stay identical across connectivity modes, for
//! example).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Network parameters (convolutions, classifier head).
pub const STREAM_NET: u64 = 0;
/// Router parameters and static edge scalars.
pub const STREAM_ROUTER: u64 = 1;
/// Dataset generation.
pub const STREAM_DATA: u64 = 2;
/// Per-epoch batch shuffling.
pub const STREAM_SHUFFLE: u64 = 3;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal draw via Box-Muller. Uses two uniform draws per call so
/// the stream position is independent of any pairing optimisation.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]: keeps ln finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
