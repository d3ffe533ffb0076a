//! Small numeric helpers shared across modules.

use crate::error::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exact factorial as f64; exact for n <= 20 (fits in u64).
pub fn factorial(n: u64) -> Result<f64> {
    if n > 20 {
        return Err(Error::FactorialRange(n));
    }
    let mut acc: u64 = 1;
    for k in 2..=n {
        acc *= k;
    }
    Ok(acc as f64)
}

/// Exact binomial coefficient as f64 for n <= 20.
pub fn binomial(n: u64, k: u64) -> Result<f64> {
    if n > 20 {
        return Err(Error::FactorialRange(n));
    }
    if k > n {
        return Ok(0.0);
    }
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    Ok(acc as f64)
}

/// Deterministic RNG stream `s` derived from a base seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Additive-recurrence quasi-random sequence in `[0,1)^d` (generalized
/// golden ratio).  Deterministic, low discrepancy, no seed needed.
pub struct QuasiRandom {
    alpha: Vec<f64>,
    state: Vec<f64>,
}

impl QuasiRandom {
    pub fn new(dim: usize) -> Self {
        // Root of x^(d+1) = x + 1.
        let mut phi = 1.0f64;
        for _ in 0..64 {
            phi = (1.0 + phi).powf(1.0 / (dim as f64 + 1.0));
        }
        let alpha: Vec<f64> = (1..=dim).map(|j| (1.0 / phi.powi(j as i32)) % 1.0).collect();
        QuasiRandom { alpha, state: vec![0.5; dim] }
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        for (s, a) in self.state.iter_mut().zip(&self.alpha) {
            *s = (*s + *a) % 1.0;
        }
        self.state.clone()
    }
}

/// Relative error with a floor protecting against division by ~0.
pub fn rel_err(approx: f64, exact: f64) -> f64 {
    let denom = exact.abs().max(1e-300);
    (approx - exact).abs() / denom
}

/// max over a slice, NaN-propagating by construction (fields are NaN-free).
pub fn fmax(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorial_exact_small() {
        assert_eq!(factorial(0).unwrap(), 1.0);
        assert_eq!(factorial(5).unwrap(), 120.0);
        assert_eq!(factorial(20).unwrap(), 2432902008176640000.0);
        assert!(factorial(21).is_err());
    }

    #[test]
    fn binomial_row_sums() {
        let total: f64 = (0..=10).map(|k| binomial(10, k).unwrap()).sum();
        assert_eq!(total, 1024.0);
        assert_eq!(binomial(17, 5).unwrap(), 6188.0);
    }

    #[test]
    fn quasi_random_stays_in_unit_cube() {
        let mut q = QuasiRandom::new(3);
        for _ in 0..1000 {
            let p = q.next_point();
            assert!(p.iter().all(|&x| (0.0..1.0).contains(&x)));
        }
    }
}
