//! Keyed random substreams.
//!
//! Every random draw in the pipeline comes from a [`RandomStream`] derived from
//! the master seed and a key `(purpose, instance_id, item_id)`. The stream seed
//! is the SHA-256 digest of
//!
//! ```text
//! b"plrank-stream-v1" || seed (u64 LE) || len(purpose) (u32 LE) || purpose
//!                     || len(instance) (u32 LE) || instance || len(item) (u32 LE) || item
//! ```
//!
//! fed to ChaCha8. Because a rationale's stream depends only on the
//! instance and item identifiers, never on where the item sits in the
//! candidate list, reordering candidates cannot change what gets generated.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn keyed(seed: u64, purpose: &str, instance_id: &str, item_id: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"plrank-stream-v1");
        h.update(seed.to_le_bytes());
        for part in [purpose, instance_id, item_id] {
            h.update((part.len() as u32).to_le_bytes());
            h.update(part.as_bytes());
        }
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        RandomStream {
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Stream keyed only by seed and purpose.
    pub fn for_purpose(seed: u64, purpose: &str) -> Self {
        Self::keyed(seed, purpose, "", "")
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn weighted_index(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        // rounding can leave u marginally above the last bucket
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Number of failures before the first success of a Bernoulli(p) trial.
    pub fn geometric(&mut self, p: f64) -> usize {
        let u = 1.0 - self.uniform();
        (u.ln() / (1.0 - p).ln()).floor() as usize
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
