//! Seed-derivation helpers.
//!
//! Every random decision in the crate draws from a [`ChaCha8Rng`] seeded
//! through [`stream`], so results depend only on the user seed and the
//! logical stream labels, never on call order across subsystems.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a label into a seed (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG from a base seed and up to two stream labels.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = mix(seed);
    for b in label.bytes() {
        h = mix(h ^ u64::from(b));
    }
    h = mix(h ^ index);
    ChaCha8Rng::seed_from_u64(h)
}

/// Standard normal draw via Box-Muller on the given RNG.
pub fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    use rand::Rng;
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
