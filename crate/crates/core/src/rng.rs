//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed with an
//! explicit 64-bit stream id, so independent work items (trials, epochs,
//! tensors) draw from disjoint sequences regardless of scheduling. Normal
//! variates use the Box-Muller transform on two uniforms in (0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Uniform in (0, 1]: 53 random bits, offset by one ulp so `ln` is finite.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals from one Box-Muller draw.
pub fn normal_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1 = open_unit(rng);
    let u2 = open_unit(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Fills `out` with independent N(0, std^2) variates.
pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, out: &mut [f64]) {
    let mut chunks = out.chunks_exact_mut(2);
    for pair in &mut chunks {
        let (a, b) = normal_pair(rng);
        pair[0] = a * std;
        pair[1] = b * std;
    }
    if let [last] = chunks.into_remainder() {
        *last = normal_pair(rng).0 * std;
    }
}
