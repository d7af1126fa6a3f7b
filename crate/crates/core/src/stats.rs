//! False-detection model: how long until a legitimate write happens to
//! equal the nonce, and an empirical check of the per-write rate at
//! reduced token widths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::token::{generate_nonce, TokenConfig, TokenWord};

pub const SECONDS_PER_YEAR: f64 = 31_536_000.0;
/// Generator stream used for the uniform words of a collision experiment.
pub const EXPERIMENT_STREAM: u64 = 2;
pub const MAX_EXPERIMENT_BITS: u32 = 24;

/// Mean years until a uniformly random write collides with a
/// `random_bits`-bit nonce at `writes_per_second`.
pub fn expected_years(random_bits: u32, writes_per_second: f64) -> f64 {
    2f64.powi(random_bits as i32) / writes_per_second / SECONDS_PER_YEAR
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YearsRow {
    pub bits: u32,
    pub rate: f64,
    pub years: f64,
}

pub fn years_table(bits: &[u32], rate: f64) -> Vec<YearsRow> {
    bits.iter()
        .map(|&bits| YearsRow {
            bits,
            rate,
            years: expected_years(bits, rate),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionResult {
    pub random_bits: u32,
    pub draws: u64,
    pub hits: u64,
    pub observed_rate: f64,
    pub expected_rate: f64,
    pub z_score: f64,
}

/// Draws `n` uniform 64-bit words and counts those that decode to the nonce
/// of a lite-layout token of `random_bits` bits.
///
/// # Panics
/// If `random_bits` is 0 or above [`MAX_EXPERIMENT_BITS`].
pub fn collision_experiment(random_bits: u32, n: u64, seed: u64) -> CollisionResult {
    assert!(
        (1..=MAX_EXPERIMENT_BITS).contains(&random_bits),
        "random_bits must be in 1..={MAX_EXPERIMENT_BITS}"
    );
    let config = TokenConfig::new(random_bits, 0).expect("width in range");
    let nonce = generate_nonce(&config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EXPERIMENT_STREAM);
    let hits = (0..n)
        .filter(|_| TokenWord(rng.random::<u64>()).is_poisoned(nonce, &config))
        .count() as u64;
    let p = 2f64.powi(-(random_bits as i32));
    let (observed_rate, z_score) = if n == 0 {
        (0.0, 0.0)
    } else {
        let nf = n as f64;
        (hits as f64 / nf, (hits as f64 - nf * p) / (nf * p * (1.0 - p)).sqrt())
    };
    CollisionResult {
        random_bits,
        draws: n,
        hits,
        observed_rate,
        expected_rate: p,
        z_score,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_scale() {
        assert!((expected_years(1, 1.0) - 2.0 / 31_536_000.0).abs() < 1e-18);
    }

    #[test]
    fn monotone() {
        for b in 1..64 {
            assert!(expected_years(b + 1, 1e9) > expected_years(b, 1e9));
            assert!(expected_years(b, 2e9) < expected_years(b, 1e9));
        }
    }

    #[test]
    fn three_bits_is_factor_eight() {
        let r = expected_years(64, 1e9) / expected_years(61, 1e9);
        assert!((r - 8.0).abs() < 1e-12);
    }

    #[test]
    fn empty_experiment() {
        let r = collision_experiment(16, 0, 1);
        assert_eq!(r.hits, 0);
        assert_eq!(r.observed_rate, 0.0);
        assert_eq!(r.z_score, 0.0);
    }

    #[test]
    fn coin_flip() {
        let r = collision_experiment(1, 10_000, 4);
        assert!(r.z_score.abs() <= 4.0, "{r:?}");
        assert!((r.observed_rate - 0.5).abs() < 0.02);
    }

    #[test]
    fn deterministic() {
        assert_eq!(collision_experiment(8, 5000, 3), collision_experiment(8, 5000, 3));
    }
}
