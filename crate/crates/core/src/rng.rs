//! Seeded randomness. Every random draw in the crate flows from a 64-bit
//! seed through [`PRNG_NAME`]; sub-streams are derived with SplitMix64 so
//! parallel work never depends on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

pub type SimRng = ChaCha8Rng;

/// Recorded in run manifests; bump when the generator or derivation changes.
pub const PRNG_NAME: &str = "ChaCha8Rng/rand_chacha-0.9;splitmix64-derive;v1";

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic child seed for stream `index` under `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

/// Draws index `k` with probability `weights[k] / Σ weights`.
/// Weights must be nonnegative with a positive finite sum.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0 && total.is_finite(), "bad weights {weights:?}");
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    // rounding left u at the boundary; return the last positive weight
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Dirichlet draw that stays finite for tiny concentrations.
///
/// Each gamma variate is drawn in log space as
/// `ln G(a+1) + ln(U)/a`, then normalised with a max shift, so
/// concentrations like 0.001 land on a simplex vertex instead of 0/0.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            let g = Gamma::new(a + 1.0, 1.0).expect("positive concentration");
            let x: f64 = g.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
            x.ln() + u.ln() / a
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}
