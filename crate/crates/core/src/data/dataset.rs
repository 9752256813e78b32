//! Paired (image tokens, conditions) examples and their line-delimited export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::modality::{derive_modality, ConditionSet, CoverageMask, ModalityKind};
use super::scene::{generate_scene, SceneKnobs, SceneSpec};
use super::vq::VqAutoencoder;
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::parallel::{self, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub knobs: SceneKnobs,
    /// Coverage rectangles take an area fraction drawn from this range.
    pub coverage_min: f64,
    pub coverage_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { knobs: SceneKnobs::default(), coverage_min: 0.3, coverage_max: 1.0 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.knobs.validate()?;
        if !(self.coverage_min > 0.0 && self.coverage_min <= self.coverage_max && self.coverage_max <= 1.0) {
            return Err(Error::config("data.coverage_min", "need 0 < coverage_min <= coverage_max <= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageTokenizer {
    /// Token id = palette id of the cell.
    Exact,
    /// Codebook ids of `patch x patch` cell blocks.
    Vq { patch: usize },
}

/// Raster-order image tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTokens {
    pub tokens: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub tokenizer: ImageTokenizer,
}

impl ImageTokens {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Palette grid for exact tokens.
    pub fn decode_exact(&self) -> Result<Vec<usize>> {
        match self.tokenizer {
            ImageTokenizer::Exact => Ok(self.tokens.clone()),
            ImageTokenizer::Vq { .. } => Err(Error::contract("exact decoding needs exact-mode image tokens")),
        }
    }
}

/// Exact mode when `quantizer` is `None`, otherwise codebook ids.
pub fn derive_image_tokens(scene: &SceneSpec, quantizer: Option<&mut VqAutoencoder>) -> Result<ImageTokens> {
    match quantizer {
        None => Ok(ImageTokens {
            tokens: scene.grid.clone(),
            height: scene.height,
            width: scene.width,
            tokenizer: ImageTokenizer::Exact,
        }),
        Some(vq) => {
            let p = vq.config().patch;
            let tokens = vq.tokenize(scene)?;
            Ok(ImageTokens { tokens, height: scene.height / p, width: scene.width / p, tokenizer: ImageTokenizer::Vq { patch: p } })
        }
    }
}

/// One training or evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub scene: SceneSpec,
    pub subset: Vec<ModalityKind>,
    pub image: ImageTokens,
    pub conditions: ConditionSet,
}

/// Random rectangle covering at least a fraction `f ~ U[min, max]` of the grid.
pub fn random_coverage(rng: &mut RngState, height: usize, width: usize, min: f64, max: f64) -> CoverageMask {
    let f = min + (max - min) * rng.uniform();
    let cells = height * width;
    let target = ((f * cells as f64).ceil() as usize).clamp(1, cells);
    let h_min = target.div_ceil(width).max(1);
    let h = rng.range_inclusive(h_min, height);
    let w = target.div_ceil(h).clamp(1, width);
    let r0 = rng.below(height - h + 1);
    let c0 = rng.below(width - w + 1);
    CoverageMask::rect(height, width, r0, c0, r0 + h - 1, c0 + w - 1)
}

/// Derives conditions for `subset` with independently drawn coverage masks.
pub fn make_example(scene: &SceneSpec, subset: &[ModalityKind], rng: &mut RngState, cfg: &DataConfig) -> Result<Example> {
    let mut conditions = ConditionSet::empty();
    for &kind in ModalityKind::ALL.iter().filter(|k| subset.contains(k)) {
        let cov = random_coverage(rng, scene.height, scene.width, cfg.coverage_min, cfg.coverage_max);
        let seq = derive_modality(scene, kind, Some(&cov))?;
        if kind == ModalityKind::Text {
            conditions.insert(seq, None);
        } else {
            conditions.insert(seq, Some(cov));
        }
    }
    let mut subset: Vec<ModalityKind> = subset.to_vec();
    subset.sort();
    subset.dedup();
    Ok(Example { scene: scene.clone(), subset, image: derive_image_tokens(scene, None)?, conditions })
}

/// `n` examples carrying every modality; example `i` uses the stream
/// derived from `(seed, i)`, so the result does not depend on worker count.
pub fn generate_dataset(cfg: &DataConfig, n: usize, seed: u64, exec: Exec) -> Result<Vec<Example>> {
    cfg.validate()?;
    parallel::map(exec, n, |i| {
        let mut rng = RngState::derive(seed, i as u64);
        let scene = generate_scene(&mut rng, &cfg.knobs)?;
        make_example(&scene, &ModalityKind::ALL, &mut rng, cfg)
    })
    .into_iter()
    .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one record per non-blank line; errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_subset_has_no_conditions() {
        let cfg = DataConfig::default();
        let mut rng = RngState::new(1);
        let scene = generate_scene(&mut rng, &cfg.knobs).unwrap();
        let ex = make_example(&scene, &[], &mut rng, &cfg).unwrap();
        assert!(ex.conditions.is_empty());
    }

    #[test]
    fn full_coverage_is_complete() {
        let cfg = DataConfig { coverage_min: 1.0, coverage_max: 1.0, ..Default::default() };
        let mut rng = RngState::new(2);
        let scene = generate_scene(&mut rng, &cfg.knobs).unwrap();
        let ex = make_example(&scene, &ModalityKind::ALL, &mut rng, &cfg).unwrap();
        assert_eq!(ex.conditions.len(), 4);
        for cov in ex.conditions.coverage.values() {
            assert_eq!(cov.count(), 64);
        }
        assert_eq!(ex.conditions.get(ModalityKind::Segmentation).unwrap().tokens, scene.grid);
    }

    #[test]
    fn coverage_fraction_in_range_and_deterministic() {
        let mut rng = RngState::new(3);
        for _ in 0..2000 {
            let m = random_coverage(&mut rng, 8, 8, 0.3, 1.0);
            let f = m.count() as f64 / 64.0;
            assert!((0.3..=1.0).contains(&f), "fraction {f}");
        }
        let a = random_coverage(&mut RngState::new(9), 8, 8, 0.3, 1.0);
        let b = random_coverage(&mut RngState::new(9), 8, 8, 0.3, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn exact_tokens_are_bijective() {
        let cfg = DataConfig::default();
        let scene = generate_scene(&mut RngState::new(4), &cfg.knobs).unwrap();
        let img = derive_image_tokens(&scene, None).unwrap();
        assert_eq!(img.decode_exact().unwrap(), scene.grid);
        assert!(img.tokens.iter().all(|&t| t < cfg.knobs.palette));
    }

    #[test]
    fn generation_independent_of_exec() {
        let cfg = DataConfig::default();
        let a = generate_dataset(&cfg, 20, 7, Exec::Sequential).unwrap();
        let b = generate_dataset(&cfg, 20, 7, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = DataConfig::default();
        let data = generate_dataset(&cfg, 5, 11, Exec::Sequential).unwrap();
        let dir = std::env::temp_dir().join(format!("mmot-jsonl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.jsonl");
        write_jsonl(&path, &data).unwrap();
        let back: Vec<Example> = read_jsonl(&path).unwrap();
        assert_eq!(back, data);
        std::fs::remove_dir_all(&dir).ok();
    }
}
