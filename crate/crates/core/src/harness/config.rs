//! Flat `section.key = value` run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, ModalityKind};
use crate::error::{Error, Result};
use crate::model::{Fusion, ModalitySpec, ModelConfig, PulseMode};
use crate::sampling::GuidanceConfig;
use crate::training::{OptimizerConfig, TrainConfig};

/// Network shape; vocabularies and lengths follow from the data knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub modalities: Vec<ModalityKind>,
    pub d_model: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub ff_mult: usize,
    pub init_std: f64,
    pub fusion: Fusion,
    pub pulse: PulseMode,
    pub mixer_residual: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(&Default::default());
        Self {
            modalities: ModalityKind::ALL.to_vec(),
            d_model: d.d_model,
            heads: d.heads,
            n_enc: d.n_enc,
            n_dec: d.n_dec,
            ff_mult: d.ff_mult,
            init_std: d.init_std,
            fusion: d.fusion,
            pulse: d.pulse,
            mixer_residual: d.mixer_residual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out examples scored for NLL and accuracy.
    pub examples: usize,
    /// Sampled scenes per condition set for accuracy and Fréchet distance.
    pub samples: usize,
    /// Seed of the held-out set, independent of the training stream.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { examples: 256, samples: 64, seed: 1_000_003 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            checkpoint_every: 500,
            data: DataConfig::default(),
            model: ModelSection::default(),
            optim: OptimizerConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_error(text: &str, err: &toml::de::Error) -> Error {
    let line = err.span().map(|s| text[..s.start.min(text.len())].matches('\n').count());
    let field = line
        .and_then(|l| text.lines().nth(l))
        .and_then(|l| l.split_once('='))
        .map(|(k, _)| k.trim().to_string())
        .unwrap_or_else(|| "config".into());
    Error::config(field, err.message().trim())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            let (leaves, tables): (Vec<_>, Vec<_>) = t.iter().partition(|(_, v)| !v.is_table());
            for (k, v) in leaves.into_iter().chain(tables) {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

impl RunConfig {
    /// Parses and validates the flat text format.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One `dotted.key = value` line per leaf; top-level keys first.
    pub fn to_text(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::config("config", e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.push(String::new());
        Ok(lines.join("\n"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let knobs = &self.data.knobs;
        let m = &self.model;
        ModelConfig {
            modalities: m
                .modalities
                .iter()
                .map(|&kind| ModalitySpec { kind, vocab: kind.vocab_size(knobs), max_len: kind.max_len(knobs) })
                .collect(),
            d_model: m.d_model,
            heads: m.heads,
            n_enc: m.n_enc,
            n_dec: m.n_dec,
            ff_mult: m.ff_mult,
            image_vocab: knobs.palette,
            image_len: knobs.cells(),
            mixer_residual: m.mixer_residual,
            fusion: m.fusion,
            pulse: m.pulse,
            init_std: m.init_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must fit in a signed 64-bit integer"));
        }
        if self.eval.seed > i64::MAX as u64 {
            return Err(Error::config("eval.seed", "must fit in a signed 64-bit integer"));
        }
        self.data.validate()?;
        let model = self.model_config();
        model.validate()?;
        self.optim.validate()?;
        self.train.validate(model.m())?;
        self.guidance.validate(model.image_vocab)?;
        if self.eval.examples == 0 {
            return Err(Error::config("eval.examples", "must be positive"));
        }
        if self.eval.samples < 2 {
            return Err(Error::config("eval.samples", "need at least 2 samples for the Fréchet distance"));
        }
        Ok(())
    }
}
