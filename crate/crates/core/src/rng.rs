//! Seed derivation and random streams.
//!
//! Every random draw in the lab comes from a ChaCha8 stream keyed by a
//! 64-bit seed (`rand_chacha::ChaCha8Rng::seed_from_u64`). Seeds for a sweep
//! cell are derived by folding the cell coordinates through SplitMix64, so
//! that another implementation can reproduce the exact same streams:
//!
//! ```text
//! h = base_seed
//! for part in [theta_y bits, unbalance bits, run_index, purpose tag]:
//!     h = splitmix64(h ^ splitmix64(part))
//! ```
//!
//! Floats are drawn as `(next_u64 >> 11) * 2^-53` and bounded integers as
//! `(next_u64 as u128 * n) >> 64`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Stream = ChaCha8Rng;

/// What a derived stream is used for. Distinct purposes never share a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Train = 1,
    Validation = 2,
    Selection = 3,
    Init = 4,
    Shuffle = 5,
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stable_hash(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(base, |h, &part| splitmix64(h ^ splitmix64(part)))
}

/// Seed for one `(cell, run, purpose)` tuple. `theta_y` is `None` for
/// real-world data, which has no complexity axis.
pub fn derive_seed(
    base_seed: u64,
    theta_y: Option<f64>,
    unbalance: f64,
    run_index: u64,
    purpose: Purpose,
) -> u64 {
    let theta_bits = theta_y.map_or(u64::MAX, f64::to_bits);
    stable_hash(
        base_seed,
        &[theta_bits, unbalance.to_bits(), run_index, purpose as u64],
    )
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(rng)
}

/// Integer in `[0, n)`.
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Fisher-Yates, walking from the back.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
