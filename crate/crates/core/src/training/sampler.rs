//! Token-count curriculum: n ~ clamp(round(|N(μ_t, σ)|), n_min, n_cap) with
//! μ_t moving linearly from `mu_start` to `mu_end` over training.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, VleError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenSampler {
    pub n_min: usize,
    pub n_cap: usize,
    pub mu_start: f64,
    pub mu_end: f64,
    pub sigma: f64,
    pub total_steps: u64,
}

impl TokenSampler {
    pub fn new(n_min: usize, n_cap: usize, mu_start: f64, mu_end: f64, sigma: f64, total_steps: u64) -> Result<Self> {
        if n_min == 0 || n_min > n_cap {
            return Err(VleError::Config(format!("need 1 ≤ n_min ≤ n_cap, got {n_min} and {n_cap}")));
        }
        if !(mu_start <= mu_end) || !mu_start.is_finite() || !mu_end.is_finite() {
            return Err(VleError::Config(format!("need mu_start ≤ mu_end, got {mu_start} and {mu_end}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(VleError::Config(format!("sigma must be finite and ≥ 0, got {sigma}")));
        }
        Ok(TokenSampler {
            n_min,
            n_cap,
            mu_start,
            mu_end,
            sigma,
            total_steps,
        })
    }

    /// μ_t; steps past the end hold at `mu_end`.
    pub fn mean_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.mu_end;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.mu_start + (self.mu_end - self.mu_start) * frac
    }

    /// Round and clamp a raw normal draw.
    pub fn discretize(&self, draw: f64) -> usize {
        let folded = draw.abs().round();
        (folded as usize).clamp(self.n_min, self.n_cap)
    }

    pub fn sample<R: Rng + ?Sized>(&self, step: u64, rng: &mut R) -> usize {
        let normal = Normal::new(self.mean_at(step), self.sigma).expect("sigma validated");
        self.discretize(normal.sample(rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_sigma_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TokenSampler::new(1, 5, 3.2, 3.2, 0.0, 10).unwrap();
        assert!((0..100).all(|t| s.sample(t, &mut rng) == 3));
        let s = TokenSampler::new(1, 5, 0.4, 0.4, 0.0, 10).unwrap();
        assert!((0..100).all(|t| s.sample(t, &mut rng) == 1));
    }

    #[test]
    fn mean_schedule_is_linear_and_monotone() {
        let s = TokenSampler::new(1, 5, 1.0, 5.0, 1.0, 100).unwrap();
        assert_eq!(s.mean_at(0), 1.0);
        assert_eq!(s.mean_at(50), 3.0);
        assert_eq!(s.mean_at(100), 5.0);
        assert_eq!(s.mean_at(1000), 5.0);
        let mut last = f64::NEG_INFINITY;
        for t in 0..=120 {
            assert!(s.mean_at(t) >= last);
            last = s.mean_at(t);
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(TokenSampler::new(3, 2, 1.0, 2.0, 1.0, 1).is_err());
        assert!(TokenSampler::new(0, 2, 1.0, 2.0, 1.0, 1).is_err());
        assert!(TokenSampler::new(1, 2, 3.0, 2.0, 1.0, 1).is_err());
        assert!(TokenSampler::new(1, 2, 1.0, 2.0, -1.0, 1).is_err());
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = TokenSampler::new(2, 5, 0.0, 9.0, 3.0, 50).unwrap();
        for t in 0..2000 {
            let n = s.sample(t % 60, &mut rng);
            assert!((2..=5).contains(&n));
        }
    }
}
