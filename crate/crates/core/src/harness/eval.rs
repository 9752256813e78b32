//! Held-out evaluation: subset NLL, constraint accuracy and Fréchet distance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::metrics::{constraint_accuracy, frechet_distance, scene_features};
use crate::data::{ConditionSet, Example, ImageTokenizer, ImageTokens, ModalityKind, SceneKnobs};
use crate::error::{Error, Result};
use crate::model::{ModalityMask, Mmot};
use crate::numerics::{ParamStore, RngState};
use crate::parallel::{self, Exec};
use crate::sampling::{sample_joint, sample_sequence, GuidanceConfig};
use crate::training::{spread, subset_nll};

/// How evaluation draws images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampler {
    /// One stream conditioned on everything present.
    Joint { temperature: f64 },
    /// Per-modality streams combined by guidance.
    Guided(GuidanceConfig),
}

impl Sampler {
    pub fn label(&self) -> String {
        match self {
            Sampler::Joint { temperature } => format!("joint(t={temperature})"),
            Sampler::Guided(g) => format!("{}(kappa={},lambda={},t={})", g.mode, g.kappa, g.default_lambda, g.temperature),
        }
    }

    /// Draws one image token sequence.
    pub fn draw(&self, model: &Mmot, store: &ParamStore<f32>, conds: &ConditionSet, rng: &mut RngState) -> Result<Vec<usize>> {
        match self {
            Sampler::Joint { temperature } => {
                let cfg = GuidanceConfig { temperature: *temperature, ..Default::default() };
                sample_joint(model, store, conds, &cfg, rng)
            }
            Sampler::Guided(cfg) => Ok(sample_sequence(model, store, conds, cfg, rng, Exec::Sequential)?.tokens),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetNll {
    pub subset: u32,
    pub nll: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub modality: ModalityKind,
    pub accuracy: f64,
    /// Sampled scenes that carried this condition.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modalities: Vec<ModalityKind>,
    pub sampler: String,
    pub seed: u64,
    /// All `2^M` subsets in mask order.
    pub nll: Vec<SubsetNll>,
    pub accuracy: Vec<Accuracy>,
    pub frechet: f64,
    /// Sampled and reference feature vectors.
    pub frechet_samples: (usize, usize),
    /// Population std of the single-modality NLLs.
    pub spread: f64,
    pub spread_examples: usize,
}

/// Per-modality mean accuracy of `images` against `conds`, with counts.
pub fn mean_accuracy(images: &[Vec<usize>], conds: &[&ConditionSet], knobs: &SceneKnobs) -> Result<Vec<Accuracy>> {
    let mut sums: BTreeMap<ModalityKind, (f64, usize)> = BTreeMap::new();
    for (tokens, c) in images.iter().zip(conds) {
        let img = ImageTokens { tokens: tokens.clone(), height: knobs.height, width: knobs.width, tokenizer: ImageTokenizer::Exact };
        for (k, a) in constraint_accuracy(&img, c, knobs)? {
            let e = sums.entry(k).or_default();
            e.0 += a;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(modality, (s, n))| Accuracy { modality, accuracy: s / n as f64, samples: n }).collect())
}

/// Draws `n` images, one per condition set in turn, with sample `i` seeded
/// from `(seed, i)`.
pub fn draw_samples(
    model: &Mmot,
    store: &ParamStore<f32>,
    conds: &[&ConditionSet],
    n: usize,
    sampler: &Sampler,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<usize>>> {
    if conds.is_empty() {
        return Err(Error::contract("no condition sets to sample from"));
    }
    parallel::map(exec, n, |i| sampler.draw(model, store, conds[i % conds.len()], &mut RngState::derive(seed, i as u64)))
        .into_iter()
        .collect()
}

/// Scores `examples` with every subset, then samples `samples` images under
/// the examples' full conditions.
pub fn evaluate(
    model: &Mmot,
    store: &ParamStore<f32>,
    examples: &[Example],
    knobs: &SceneKnobs,
    samples: usize,
    sampler: &Sampler,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::config("testset", "empty test set"));
    }
    let m = model.config().m();
    let mut nll = Vec::with_capacity(1 << m);
    for bits in 0..1u32 << m {
        let v = subset_nll(model, store, examples, &ModalityMask::from_bits(m, bits), exec)?;
        nll.push(SubsetNll { subset: bits, nll: v, examples: examples.len() });
    }
    let singles: Vec<f64> = (0..m).map(|j| nll[1 << j].nll).collect();

    let conds: Vec<&ConditionSet> = examples.iter().map(|e| &e.conditions).collect();
    let images = draw_samples(model, store, &conds, samples, sampler, seed, exec)?;
    let used: Vec<&ConditionSet> = (0..samples).map(|i| conds[i % conds.len()]).collect();
    let accuracy = mean_accuracy(&images, &used, knobs)?;
    let fake: Vec<Vec<f64>> = images.iter().map(|t| scene_features(t, knobs)).collect();
    let real: Vec<Vec<f64>> = examples.iter().map(|e| e.image.decode_exact().map(|g| scene_features(&g, knobs))).collect::<Result<_>>()?;
    let frechet = if fake.len() >= 2 && real.len() >= 2 { frechet_distance(&fake, &real)? } else { f64::NAN };

    Ok(EvalReport {
        modalities: model.config().modalities.iter().map(|s| s.kind).collect(),
        sampler: sampler.label(),
        seed,
        nll,
        accuracy,
        frechet,
        frechet_samples: (fake.len(), real.len()),
        spread: spread(&singles),
        spread_examples: examples.len(),
    })
}

impl EvalReport {
    /// Subset name like `text+sketch`, or `none`.
    pub fn subset_name(&self, bits: u32) -> String {
        let names: Vec<&str> = self.modalities.iter().enumerate().filter(|(j, _)| bits >> j & 1 == 1).map(|(_, k)| k.tag()).collect();
        if names.is_empty() { "none".into() } else { names.join("+") }
    }

    /// Long format: `metric,key,value,n,seed`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "key", "value", "n", "seed"])?;
        let seed = self.seed.to_string();
        for r in &self.nll {
            w.write_record(["nll", &self.subset_name(r.subset), &r.nll.to_string(), &r.examples.to_string(), &seed])?;
        }
        for a in &self.accuracy {
            w.write_record(["accuracy", a.modality.name(), &a.accuracy.to_string(), &a.samples.to_string(), &seed])?;
        }
        let n = format!("{}/{}", self.frechet_samples.0, self.frechet_samples.1);
        w.write_record(["frechet", "toy7", &self.frechet.to_string(), &n, &seed])?;
        w.write_record(["spread", "single_modality_nll", &self.spread.to_string(), &self.spread_examples.to_string(), &seed])?;
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sampler {}  seed {}", self.sampler, self.seed);
        let _ = writeln!(s, "held-out NLL (nats/token, n = {}):", self.spread_examples);
        for r in &self.nll {
            let _ = writeln!(s, "  {:<28} {:.4}", self.subset_name(r.subset), r.nll);
        }
        let _ = writeln!(s, "single-modality spread {:.4}", self.spread);
        let _ = writeln!(s, "constraint accuracy:");
        for a in &self.accuracy {
            let _ = writeln!(s, "  {:<13} {:.4}  (n = {})", a.modality.name(), a.accuracy, a.samples);
        }
        let _ = writeln!(s, "frechet distance {:.4}  (n = {} sampled / {} reference)", self.frechet, self.frechet_samples.0, self.frechet_samples.1);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DataConfig};
    use crate::model::ModelConfig;

    fn setup() -> (Mmot, ParamStore<f32>, DataConfig, Vec<Example>) {
        let knobs = SceneKnobs { height: 4, width: 4, palette: 4, min_objects: 1, max_objects: 2, min_side: 1, max_side: 3 };
        let cfg = ModelConfig { d_model: 8, heads: 2, n_enc: 1, n_dec: 1, ff_mult: 2, init_std: 0.2, ..ModelConfig::desk(&knobs) };
        let (model, store) = Mmot::init::<f32>(&cfg, &mut RngState::new(1)).unwrap();
        let data = DataConfig { knobs, ..Default::default() };
        let exs = generate_dataset(&data, 6, 2, Exec::Sequential).unwrap();
        (model, store, data, exs)
    }

    #[test]
    fn report_covers_every_subset_with_counts() {
        let (model, store, data, exs) = setup();
        let r = evaluate(&model, &store, &exs, &data.knobs, 8, &Sampler::Joint { temperature: 1.0 }, 3, Exec::Sequential).unwrap();
        assert_eq!(r.nll.len(), 16);
        assert!(r.nll.iter().all(|n| n.examples == 6 && n.nll > 0.0));
        assert_eq!(r.frechet_samples, (8, 6));
        assert!(r.frechet >= 0.0);
        assert!(r.accuracy.iter().all(|a| a.samples > 0 && (0.0..=1.0).contains(&a.accuracy)));
        assert_eq!(r.subset_name(0), "none");
        assert_eq!(r.subset_name(0b1010), "seg+bbox");
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("nll,")).count(), 16);
        assert!(r.summary().contains("frechet"));
    }

    #[test]
    fn same_seed_gives_identical_reports() {
        let (model, store, data, exs) = setup();
        let s = Sampler::Guided(GuidanceConfig::jsd(2.0));
        let a = evaluate(&model, &store, &exs, &data.knobs, 4, &s, 9, Exec::Sequential).unwrap();
        let b = evaluate(&model, &store, &exs, &data.knobs, 4, &s, 9, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_test_set_is_a_config_error() {
        let (model, store, data, _) = setup();
        let r = evaluate(&model, &store, &[], &data.knobs, 4, &Sampler::Joint { temperature: 1.0 }, 0, Exec::Sequential);
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn ground_truth_images_score_perfectly() {
        let (_, _, data, exs) = setup();
        let images: Vec<Vec<usize>> = exs.iter().map(|e| e.image.tokens.clone()).collect();
        let conds: Vec<&ConditionSet> = exs.iter().map(|e| &e.conditions).collect();
        for a in mean_accuracy(&images, &conds, &data.knobs).unwrap() {
            assert_eq!(a.accuracy, 1.0);
        }
    }
}
