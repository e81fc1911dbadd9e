//! Counter-based random streams.
//!
//! A stream is fully described by `(seed, counter)`: draws depend only on that
//! pair, never on thread scheduling or on how many other streams exist. Each
//! consumer (a dropout layer at a given iteration, a weight initializer) gets
//! its own stream through [`RngStream::derive`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        RngStream { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream keyed by `key`, starting at counter 0.
    pub fn derive(&self, key: u64) -> RngStream {
        RngStream::new(mix(self.seed ^ mix(key.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    fn generator(&self) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::seed_from_u64(self.seed);
        // One u64 draw consumes two 32-bit words.
        g.set_word_pos(u128::from(self.counter) * 2);
        g
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.generator().next_u64();
        self.counter += 1;
        v
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `n` uniform draws in `[0, 1)`; advances the counter by `n`.
    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        let mut g = self.generator();
        let out = (0..n)
            .map(|_| (g.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
            .collect();
        self.counter += n as u64;
        out
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Multiply-shift reduction; bias is below 2^-32 for the sizes used here.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller, consumes two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
