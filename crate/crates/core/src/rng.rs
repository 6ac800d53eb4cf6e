//! Seeded randomness plumbing.
//!
//! All randomness in the engine flows from one root seed through named
//! sub-streams (`corpus`, `init`, `train`, `sample`, ...). Sampler coordinate
//! updates additionally use counter-based streams keyed by
//! `(seed, step, coordinate)` so per-coordinate draws are independent of
//! iteration order and safe to parallelize.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a, used to turn stream names into tags.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 avalanche step. Good enough mixing to decorrelate
/// structured tag tuples like (step, coordinate).
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a stream name.
pub fn derive(seed: u64, name: &str) -> u64 {
    mix64(seed ^ fnv1a(name.as_bytes()))
}

/// Derive a child seed from a root seed and numeric tags.
pub fn derive_tagged(seed: u64, tags: &[u64]) -> u64 {
    let mut s = mix64(seed);
    for &t in tags {
        s = mix64(s ^ t.wrapping_mul(0x9e3779b97f4a7c15));
    }
    s
}

/// Named sub-stream off the root seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, name))
}

/// Minimal counter-based generator for per-coordinate sampler streams.
///
/// SplitMix64 state advance; statistically plenty for the Monte Carlo
/// tolerances used here and roughly 20x cheaper to key than ChaCha.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }
}

impl RngCore for SplitMix64 {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        let mut chunks = dst.chunks_exact_mut(8);
        for chunk in &mut chunks {
            chunk.copy_from_slice(&self.next_u64().to_le_bytes());
        }
        let rem = chunks.into_remainder();
        if !rem.is_empty() {
            let bytes = self.next_u64().to_le_bytes();
            rem.copy_from_slice(&bytes[..rem.len()]);
        }
    }
}

/// Deterministic per-coordinate stream: `seed (+) step (+) coordinate`.
pub fn coord_stream(seed: u64, step: u64, coord: u64) -> SplitMix64 {
    SplitMix64::new(derive_tagged(seed, &[step, coord]))
}

/// Uniform draw in `[0, 1)` with 53-bit resolution.
pub fn uniform_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sample an index from an unnormalized nonnegative weight vector.
///
/// Panics are avoided by falling back to the last positive-weight entry when
/// rounding pushes the dart past the total.
pub fn sample_weighted<R: RngCore>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "sample_weighted needs positive total mass");
    let mut dart = uniform_f64(rng) * total;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            dart -= w;
            if dart <= 0.0 {
                return i;
            }
        }
    }
    last_positive
}

/// Standard normal via Box-Muller.
pub fn gauss<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = (uniform_f64(rng)).max(1e-300);
    let u2 = uniform_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
