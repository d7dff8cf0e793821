//! Seeded pseudo-random streams.
//!
//! All randomness goes through xoshiro256** seeded by splitmix64 (the
//! `seed_from_u64` expansion of `rand_xoshiro`). Data generation only uses
//! integer arithmetic and the explicit `u64 → f64` mapping below, so
//! generated datasets are identical on every platform.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

pub type Prng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Independent stream for item `index` of a run seeded with `seed`.
pub fn substream(seed: u64, index: u64) -> Prng {
    seeded(seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Uniform in `[0, 1)` from the top 53 bits.
pub fn unit(rng: &mut Prng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `lo..=hi`.
pub fn int_in(rng: &mut Prng, lo: i64, hi: i64) -> i64 {
    assert!(lo <= hi);
    let span = (hi - lo) as u64 + 1;
    lo + (rng.next_u64() % span) as i64
}

/// Approximately standard normal: Irwin–Hall sum of twelve uniforms minus
/// six. Uses only additions, so results are bit-identical across libms.
pub fn gauss(rng: &mut Prng) -> f64 {
    (0..12).map(|_| unit(rng)).sum::<f64>() - 6.0
}

/// Normal with standard deviation `std`, redrawn until within two standard
/// deviations of zero.
pub fn truncated_normal(rng: &mut Prng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
