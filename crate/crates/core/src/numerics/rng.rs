use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded deterministic random stream.
///
/// Identical seeds and identical call sequences yield identical streams.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Serializable position of an [`RngState`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Independent child stream derived from `(seed, index)` only, regardless
    /// of how much of this stream has been consumed.
    pub fn split(&self, index: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    pub fn derive(seed: u64, index: u64) -> RngState {
        RngState::new(seed).split(index)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Index drawn with probability proportional to `weights`; uniform when
    /// the weights are all zero or otherwise unusable.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        match WeightedIndex::new(weights) {
            Ok(d) => d.sample(&mut self.rng),
            Err(_) => self.below(weights.len()),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot { seed: self.seed, stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    pub fn restore(snap: RngSnapshot) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(snap.seed);
        rng.set_stream(snap.stream);
        rng.set_word_pos(snap.word_pos);
        Self { seed: snap.seed, rng }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_respects_weights() {
        let mut r = RngState::new(3);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[r.categorical(&[1.0, 0.0, 3.0])] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 30_000.0 - 0.25).abs() < 0.01);
        let z = r.categorical(&[0.0, 0.0]);
        assert!(z < 2);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn snapshot_resumes_mid_stream() {
        let mut a = RngState::new(7);
        for _ in 0..13 {
            a.uniform();
        }
        let mut b = RngState::restore(a.snapshot());
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_ignores_consumption() {
        let a = RngState::new(3);
        let mut b = RngState::new(3);
        b.uniform();
        assert_eq!(a.split(5).next_u64(), b.split(5).next_u64());
        assert_ne!(a.split(5).next_u64(), a.split(6).next_u64());
    }
}
