use serde::{Deserialize, Serialize};

use crate::data::{ModalityKind, SceneKnobs};
use crate::error::{Error, Result};

/// How condition encodings enter the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Per-modality cross-attention fused by the token mixer in every layer.
    Mixer,
    /// One shared cross-attention over the concatenated encodings.
    Concat,
}

/// Origin of the mixer's query vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseMode {
    /// Layer-specific linear projection of the image stream.
    Projected,
    /// Free learned `L x d` parameter per layer.
    Free,
}

/// One condition modality as seen by the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    pub vocab: usize,
    /// Maximum token count (positional table length).
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub d_model: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Feed-forward hidden width is `ff_mult * d_model`.
    pub ff_mult: usize,
    pub image_vocab: usize,
    pub image_len: usize,
    pub mixer_residual: bool,
    pub fusion: Fusion,
    pub pulse: PulseMode,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale defaults over the modalities of `knobs`.
    pub fn desk(knobs: &SceneKnobs) -> Self {
        Self {
            modalities: ModalityKind::ALL
                .iter()
                .map(|&kind| ModalitySpec { kind, vocab: kind.vocab_size(knobs), max_len: kind.max_len(knobs) })
                .collect(),
            d_model: 64,
            heads: 4,
            n_enc: 2,
            n_dec: 4,
            ff_mult: 4,
            image_vocab: knobs.palette,
            image_len: knobs.cells(),
            mixer_residual: true,
            fusion: Fusion::Mixer,
            pulse: PulseMode::Projected,
            init_std: 0.02,
        }
    }

    /// Reference widths and depths of the full-scale model.
    pub const FULL_SCALE: (usize, usize, usize, usize) = (768, 12, 12, 24);

    pub fn m(&self) -> usize {
        self.modalities.len()
    }

    pub fn ff_width(&self) -> usize {
        self.ff_mult * self.d_model
    }

    pub fn modality_index(&self, kind: ModalityKind) -> Option<usize> {
        self.modalities.iter().position(|s| s.kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("model.d_model", "must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config("model.heads", format!("must divide d_model = {}", self.d_model)));
        }
        if self.n_dec == 0 {
            return Err(Error::config("model.n_dec", "need at least one decoder layer"));
        }
        if self.ff_mult == 0 {
            return Err(Error::config("model.ff_mult", "must be positive"));
        }
        if self.image_vocab < 2 || self.image_len == 0 {
            return Err(Error::config("model.image_vocab", "need vocab >= 2 and a nonempty sequence"));
        }
        if self.m() > 32 {
            return Err(Error::config("model.modalities", "at most 32 modalities"));
        }
        for (i, s) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.kind == s.kind) {
                return Err(Error::config("model.modalities", format!("{} listed twice", s.kind)));
            }
            if s.vocab == 0 || s.max_len == 0 {
                return Err(Error::config("model.modalities", format!("{} needs positive vocab and length", s.kind)));
            }
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("model.init_std", "must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count; see FORMATS.md.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ff_width();
        let ln = 2 * d;
        let attn = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let block = 2 * ln + attn + ffn;
        let enc: usize = self.modalities.iter().map(|s| s.vocab * d + s.max_len * d + self.n_enc * block).sum();
        let fusion = match self.fusion {
            Fusion::Mixer => {
                let pulse = match self.pulse {
                    PulseMode::Projected => d * d + d,
                    PulseMode::Free => self.image_len * d,
                };
                self.m() * (2 * ln + attn) + pulse
            }
            Fusion::Concat => 2 * ln + attn,
        };
        let dec_layer = ln + attn + fusion + ln + ffn;
        let dec = d + self.image_vocab * d + self.image_len * d + self.n_dec * dec_layer + ln + d * self.image_vocab + self.image_vocab;
        enc + dec
    }
}
