//! Retry delays: 1 s doubling per attempt, capped at 60 s, then ±20% jitter.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BASE: Duration = Duration::from_secs(1);
pub const FACTOR: u32 = 2;
pub const CAP: Duration = Duration::from_secs(60);
pub const JITTER: f64 = 0.2;

pub struct Backoff {
    rng: ChaCha8Rng,
}

impl Backoff {
    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Delay before the next try, given the number of failed attempts so far
    /// (at least 1).
    pub fn delay(&mut self, attempts: u32) -> Duration {
        let exp = attempts.saturating_sub(1).min(16);
        let nominal = BASE.saturating_mul(FACTOR.saturating_pow(exp)).min(CAP);
        let factor = self.rng.gen_range(1.0 - JITTER..=1.0 + JITTER);
        nominal.mul_f64(factor)
    }

    /// Largest delay `delay` can return.
    pub fn max_delay() -> Duration {
        CAP.mul_f64(1.0 + JITTER)
    }
}
