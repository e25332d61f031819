//! Seedable, splittable random number generation.
//!
//! Every stochastic routine in the crate takes an explicit `&mut SimRng`.
//! Independent tasks obtain their own generator either by [`SimRng::split`]
//! (draws a child seed from the parent) or by [`SimRng::named`] (a stream
//! keyed by a root seed and a label, independent of call order).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Generator for the stream `name` under root `seed`.
    pub fn named(seed: u64, name: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a(name.as_bytes()));
        Self { inner }
    }

    /// Child generator seeded from this one; advances the parent.
    pub fn split(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Index drawn from a (normalized) probability vector by inverse CDF.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        debug_assert!(!probs.is_empty());
        let u = self.uniform();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
            }
            acc += p;
            if u < acc {
                return i;
            }
        }
        last_positive
    }
}

impl RngCore for SimRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
