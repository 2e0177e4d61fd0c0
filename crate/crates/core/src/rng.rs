//! Deterministic random streams.
//!
//! Every random decision is drawn from a xoshiro256** generator whose state
//! is filled by splitmix64 from a 64-bit seed. Seeds for independent streams
//! are derived from `(global seed, domain, index)` so that batch order and
//! per-example corruption never depend on how work is scheduled.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 output for the given state.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream domains keep unrelated consumers of the same seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Corruption = 1,
    BatchOrder = 2,
    Dropout = 3,
    ContrastiveDropout = 4,
    Init = 5,
    Corpus = 6,
    Adversarial = 7,
    Heldout = 8,
    Task = 9,
}

pub fn derive_seed(global: u64, domain: Domain, index: u64) -> u64 {
    let a = splitmix64(global ^ (domain as u64).wrapping_mul(GOLDEN));
    splitmix64(a ^ splitmix64(index))
}

/// Generator for `(global, domain, index)`, seeded through splitmix64.
pub fn stream(global: u64, domain: Domain, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(global, domain, index))
}

/// Uniform integer in `[0, n)` from 64-bit draws (platform independent).
pub fn below(rng: &mut Rng, n: u64) -> u64 {
    use rand::Rng as _;
    rng.gen_range(0..n)
}

/// Standard normal via Box-Muller on two uniform draws.
pub fn normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fisher-Yates shuffle using [`below`].
pub fn shuffle<X>(rng: &mut Rng, items: &mut [X]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// `k` distinct indices from `0..n` in sampling order (partial Fisher-Yates).
pub fn sample_without_replacement(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + below(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
