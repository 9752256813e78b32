use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModalityMask;
use crate::numerics::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerMode {
    /// Subsets drawn in proportion to their running loss.
    Balanced,
    /// Every subset equally likely.
    Uniform,
}

impl std::str::FromStr for SchedulerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::config("train.mode", format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Balanced => "balanced",
            Self::Uniform => "uniform",
        })
    }
}

pub const DEFAULT_MIN_PROB: f64 = 0.01;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// Sampling distribution over all `2^M` condition subsets.
///
/// Subset `s` is the bitmask whose bit `j` marks modality `j` of the model
/// config as present; subset 0 is unconditional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScheduler {
    pub modalities: usize,
    pub mode: SchedulerMode,
    /// Running per-subset NLL in nats per token.
    pub loss_ema: Vec<f64>,
    pub min_prob: f64,
    pub decay: f64,
}

impl SubsetScheduler {
    /// Every EMA starts at `ln image_vocab`, the loss of a uniform predictor.
    pub fn new(modalities: usize, image_vocab: usize, mode: SchedulerMode) -> Self {
        let n = 1usize << modalities;
        Self {
            modalities,
            mode,
            loss_ema: vec![(image_vocab as f64).ln(); n],
            min_prob: DEFAULT_MIN_PROB,
            decay: DEFAULT_EMA_DECAY,
        }
    }

    pub fn subsets(&self) -> usize {
        self.loss_ema.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss_ema.len() != 1usize << self.modalities {
            return Err(Error::config("train.scheduler", "EMA table must have 2^M entries"));
        }
        if !(0.0..=1.0 / self.subsets() as f64).contains(&self.min_prob) {
            return Err(Error::config("train.min_prob", format!("must lie in [0, 1/{}]", self.subsets())));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::config("train.ema_decay", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Folds one observed loss for subset `bits` into its running average.
    pub fn observe(&mut self, bits: u32, loss: f64) {
        let e = &mut self.loss_ema[bits as usize];
        *e = self.decay * *e + (1.0 - self.decay) * loss;
    }

    /// Probability of each subset.
    ///
    /// Balanced mode normalises the EMAs, then raises anything below
    /// `min_prob` to the floor and rescales the rest to fill what is left,
    /// repeating until no unfloored entry falls below the floor.
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.subsets();
        if self.mode == SchedulerMode::Uniform {
            return Ok(vec![1.0 / n as f64; n]);
        }
        if let Some(i) = self.loss_ema.iter().position(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::contract(format!("loss EMA of subset {i} is {}", self.loss_ema[i])));
        }
        let mut floored = vec![false; n];
        loop {
            let free = 1.0 - self.min_prob * floored.iter().filter(|&&f| f).count() as f64;
            let total: f64 = self.loss_ema.iter().zip(&floored).filter(|(_, &f)| !f).map(|(e, _)| e).sum();
            let p: Vec<f64> = self
                .loss_ema
                .iter()
                .zip(&floored)
                .map(|(&e, &f)| if f { self.min_prob } else { free * e / total })
                .collect();
            let mut changed = false;
            for (i, &pi) in p.iter().enumerate() {
                if !floored[i] && pi < self.min_prob {
                    floored[i] = true;
                    changed = true;
                }
            }
            if !changed {
                return Ok(p);
            }
        }
    }

    /// Draws one subset.
    pub fn sample(&self, rng: &mut RngState) -> Result<ModalityMask> {
        let p = self.probabilities()?;
        Ok(ModalityMask::from_bits(self.modalities, rng.categorical(&p) as u32))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn balanced(ema: Vec<f64>) -> SubsetScheduler {
        let m = ema.len().trailing_zeros() as usize;
        SubsetScheduler { modalities: m, mode: SchedulerMode::Balanced, loss_ema: ema, min_prob: DEFAULT_MIN_PROB, decay: 0.99 }
    }

    #[test]
    fn equal_emas_give_uniform() {
        let s = SubsetScheduler::new(4, 6, SchedulerMode::Balanced);
        assert_eq!(s.subsets(), 16);
        for p in s.probabilities().unwrap() {
            assert!((p - 1.0 / 16.0).abs() < 1e-15);
        }
        assert_eq!(s.loss_ema[0], 6f64.ln());
    }

    #[test]
    fn two_subset_ratio() {
        let p = balanced(vec![1.0, 3.0]).probabilities().unwrap();
        assert_eq!(p, vec![0.25, 0.75]);
    }

    #[test]
    fn uniform_mode_ignores_emas() {
        let mut s = balanced(vec![1.0, 2.0, 3.0, 50.0]);
        s.mode = SchedulerMode::Uniform;
        assert_eq!(s.probabilities().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn dominant_loss_is_most_likely() {
        let mut ema = vec![1.0; 16];
        ema[5] = 4.0;
        let p = balanced(ema).probabilities().unwrap();
        assert!(p.iter().enumerate().all(|(i, &q)| i == 5 || q < p[5]));
    }

    #[test]
    fn floor_is_applied_and_mass_conserved() {
        let mut ema = vec![10.0; 16];
        ema[0] = 0.01;
        ema[1] = 0.02;
        let p = balanced(ema).probabilities().unwrap();
        assert_eq!(p[0], DEFAULT_MIN_PROB);
        assert_eq!(p[1], DEFAULT_MIN_PROB);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&q| q >= DEFAULT_MIN_PROB));
    }

    #[test]
    fn nonpositive_ema_is_contract_error() {
        let r = balanced(vec![1.0, 0.0]).probabilities();
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn degenerate_distribution_draws_the_heavy_subset() {
        let mut s = balanced(vec![1e-12, 1e-12, 1.0, 1e-12]);
        s.min_prob = 0.0;
        let mut rng = RngState::new(0);
        for _ in 0..100 {
            assert_eq!(s.sample(&mut rng).unwrap().bits(), 2);
        }
    }

    #[test]
    fn uniform_draw_frequencies() {
        let s = SubsetScheduler::new(4, 6, SchedulerMode::Uniform);
        let mut rng = RngState::new(11);
        let mut counts = [0usize; 16];
        let n = 100_000;
        for _ in 0..n {
            counts[s.sample(&mut rng).unwrap().bits() as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 16.0).abs() < 0.01);
        }
    }

    #[test]
    fn draws_are_reproducible() {
        let s = balanced((1..=16).map(f64::from).collect());
        let mut a = RngState::new(4);
        let mut b = RngState::new(4);
        for _ in 0..50 {
            assert_eq!(s.sample(&mut a).unwrap(), s.sample(&mut b).unwrap());
        }
    }

    #[test]
    fn observe_moves_ema_toward_loss() {
        let mut s = SubsetScheduler::new(2, 6, SchedulerMode::Balanced);
        s.observe(3, 0.0);
        assert!((s.loss_ema[3] - 0.99 * 6f64.ln()).abs() < 1e-15);
        assert_eq!(s.loss_ema[2], 6f64.ln());
    }

    #[test]
    fn invalid_floor_rejected() {
        let mut s = SubsetScheduler::new(4, 6, SchedulerMode::Balanced);
        s.min_prob = 0.1;
        assert!(matches!(s.probabilities(), Err(Error::Config { .. })));
    }

    proptest! {
        #[test]
        fn sums_to_one_and_respects_floor(ema in prop::collection::vec(1e-3f64..10.0, 16)) {
            let p = balanced(ema).probabilities().unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&q| q >= DEFAULT_MIN_PROB - 1e-15));
        }

        #[test]
        fn scale_invariant(ema in prop::collection::vec(1e-3f64..10.0, 16), c in 1e-3f64..1e3) {
            let p = balanced(ema.clone()).probabilities().unwrap();
            let q = balanced(ema.iter().map(|e| e * c).collect()).probabilities().unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn raising_one_ema_is_monotone(ema in prop::collection::vec(0.5f64..3.0, 16), i in 0usize..16, delta in 1e-6f64..1.0) {
            let p = balanced(ema.clone()).probabilities().unwrap();
            let mut raised = ema;
            raised[i] += delta;
            let q = balanced(raised).probabilities().unwrap();
            for j in 0..16 {
                if j == i {
                    prop_assert!(q[j] > p[j]);
                } else {
                    prop_assert!(q[j] < p[j]);
                }
            }
        }

        #[test]
        fn balanced_draws_match_probabilities(ema in prop::collection::vec(0.5f64..3.0, 4), seed in 0u64..1000) {
            let s = balanced(ema);
            let p = s.probabilities().unwrap();
            let mut rng = RngState::new(seed);
            let n = 20_000;
            let mut counts = [0usize; 4];
            for _ in 0..n {
                counts[s.sample(&mut rng).unwrap().bits() as usize] += 1;
            }
            let chi2: f64 = counts.iter().zip(&p).map(|(&c, &q)| (c as f64 - n as f64 * q).powi(2) / (n as f64 * q)).sum();
            // 3 degrees of freedom, p = 1e-6
            prop_assert!(chi2 < 30.66, "chi2 {}", chi2);
        }
    }
}
