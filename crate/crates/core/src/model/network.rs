//! Modality encoders, causal decoder with per-modality cross-attention and the
//! multistage token mixer.

use serde::{Deserialize, Serialize};

use super::config::{Fusion, ModelConfig, PulseMode};
use crate::data::{ConditionSet, ModalityKind, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{randn, AttnMask, Graph, ParamId, ParamStore, Real, RngState, Tensor, Var, LN_EPS};

#[derive(Clone, Copy, Debug)]
pub(crate) struct LnIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIds {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct CrossIds {
    pub ln_q: LnIds,
    pub ln_c: LnIds,
    pub attn: AttnIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum PulseIds {
    Projected { w: ParamId, b: ParamId },
    Free(ParamId),
}

#[derive(Clone, Debug)]
pub(crate) enum FusionIds {
    Mixer { cross: Vec<CrossIds>, pulse: PulseIds },
    Concat(CrossIds),
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayerIds {
    pub ln_sa: LnIds,
    pub sa: AttnIds,
    pub fusion: FusionIds,
    pub ln_ff: LnIds,
    pub ffn: FfnIds,
}

/// Which condition modalities take part in a forward pass, in config order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub present: Vec<bool>,
}

impl ModalityMask {
    pub fn none(m: usize) -> Self {
        Self { present: vec![false; m] }
    }

    pub fn all(m: usize) -> Self {
        Self { present: vec![true; m] }
    }

    pub fn from_bits(m: usize, bits: u32) -> Self {
        Self { present: (0..m).map(|i| bits >> i & 1 == 1).collect() }
    }

    pub fn bits(&self) -> u32 {
        self.present.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| 1u32 << i).sum()
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

/// Mixer softmax scores of one decoder layer: `L x (M+1)`, candidate 0 is the
/// image stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationWeights<T> {
    pub layer: usize,
    pub weights: Tensor<T>,
    /// Active flag per candidate; the image stream is always active.
    pub active: Vec<bool>,
}

/// Head-averaged cross-attention probabilities per layer and modality.
#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    pub cross: Vec<Vec<Option<Tensor<T>>>>,
}

pub struct DecoderOutput<T> {
    pub logits: Var,
    pub weights: Vec<CombinationWeights<T>>,
    pub trace: Option<DecoderTrace<T>>,
}

/// Per-modality cross-attention maps (`L x l_m`) and their layer average.
#[derive(Clone, Debug)]
pub struct AttentionMaps<T> {
    pub modalities: Vec<ModalityKind>,
    pub per_layer: Vec<Vec<Option<Tensor<T>>>>,
    pub averaged: Vec<Option<Tensor<T>>>,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// MMoT architecture: the configuration plus handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mmot {
    cfg: ModelConfig,
    pub(crate) enc: Vec<EncoderIds>,
    pub(crate) bos: ParamId,
    pub(crate) tok: ParamId,
    pub(crate) pos: ParamId,
    pub(crate) layers: Vec<DecoderLayerIds>,
    pub(crate) ln_f: LnIds,
    pub(crate) head_w: ParamId,
    pub(crate) head_b: ParamId,
}

fn build(cfg: &ModelConfig, reg: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>) -> Result<Mmot> {
    cfg.validate()?;
    let d = cfg.d_model;
    let f = cfg.ff_width();
    let std = cfg.init_std;
    let out_std = std / (2.0 * (cfg.n_dec + cfg.n_enc).max(1) as f64).sqrt();
    let ln = |reg: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>, p: &str| -> Result<LnIds> {
        Ok(LnIds { g: reg(format!("{p}.g"), vec![d], Init::Ones)?, b: reg(format!("{p}.b"), vec![d], Init::Zeros)? })
    };
    let attn = |reg: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>, p: &str| -> Result<AttnIds> {
        Ok(AttnIds {
            wq: reg(format!("{p}.wq"), vec![d, d], Init::Normal(std))?,
            wk: reg(format!("{p}.wk"), vec![d, d], Init::Normal(std))?,
            wv: reg(format!("{p}.wv"), vec![d, d], Init::Normal(std))?,
            wo: reg(format!("{p}.wo"), vec![d, d], Init::Normal(out_std))?,
        })
    };
    let ffn = |reg: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<ParamId>, p: &str| -> Result<FfnIds> {
        Ok(FfnIds {
            w1: reg(format!("{p}.w1"), vec![d, f], Init::Normal(std))?,
            b1: reg(format!("{p}.b1"), vec![f], Init::Zeros)?,
            w2: reg(format!("{p}.w2"), vec![f, d], Init::Normal(out_std))?,
            b2: reg(format!("{p}.b2"), vec![d], Init::Zeros)?,
        })
    };

    let mut enc = Vec::with_capacity(cfg.m());
    for s in &cfg.modalities {
        let p = format!("enc.{}", s.kind.tag());
        let tok = reg(format!("{p}.tok"), vec![s.vocab, d], Init::Normal(std))?;
        let pos = reg(format!("{p}.pos"), vec![s.max_len, d], Init::Normal(std))?;
        let mut blocks = Vec::with_capacity(cfg.n_enc);
        for i in 0..cfg.n_enc {
            let q = format!("{p}.layer{i}");
            blocks.push(BlockIds {
                ln1: ln(reg, &format!("{q}.ln1"))?,
                attn: attn(reg, &format!("{q}.sa"))?,
                ln2: ln(reg, &format!("{q}.ln2"))?,
                ffn: ffn(reg, &format!("{q}.ff"))?,
            });
        }
        enc.push(EncoderIds { tok, pos, blocks });
    }

    let bos = reg("dec.bos".into(), vec![1, d], Init::Normal(std))?;
    let tok = reg("dec.tok".into(), vec![cfg.image_vocab, d], Init::Normal(std))?;
    let pos = reg("dec.pos".into(), vec![cfg.image_len, d], Init::Normal(std))?;
    let mut layers = Vec::with_capacity(cfg.n_dec);
    for n in 0..cfg.n_dec {
        let p = format!("dec.layer{n}");
        let ln_sa = ln(reg, &format!("{p}.ln_sa"))?;
        let sa = attn(reg, &format!("{p}.sa"))?;
        let fusion = match cfg.fusion {
            Fusion::Mixer => {
                let mut cross = Vec::with_capacity(cfg.m());
                for s in &cfg.modalities {
                    let q = format!("{p}.ca.{}", s.kind.tag());
                    cross.push(CrossIds {
                        ln_q: ln(reg, &format!("{q}.ln_q"))?,
                        ln_c: ln(reg, &format!("{q}.ln_c"))?,
                        attn: attn(reg, &q)?,
                    });
                }
                let pulse = match cfg.pulse {
                    PulseMode::Projected => PulseIds::Projected {
                        w: reg(format!("{p}.mix.pulse.w"), vec![d, d], Init::Normal(std))?,
                        b: reg(format!("{p}.mix.pulse.b"), vec![d], Init::Zeros)?,
                    },
                    PulseMode::Free => {
                        PulseIds::Free(reg(format!("{p}.mix.pulse"), vec![cfg.image_len, d], Init::Normal(std))?)
                    }
                };
                FusionIds::Mixer { cross, pulse }
            }
            Fusion::Concat => {
                let q = format!("{p}.cat");
                FusionIds::Concat(CrossIds {
                    ln_q: ln(reg, &format!("{q}.ln_q"))?,
                    ln_c: ln(reg, &format!("{q}.ln_c"))?,
                    attn: attn(reg, &q)?,
                })
            }
        };
        let ln_ff = ln(reg, &format!("{p}.ln_ff"))?;
        let ffn_ids = ffn(reg, &format!("{p}.ff"))?;
        layers.push(DecoderLayerIds { ln_sa, sa, fusion, ln_ff, ffn: ffn_ids });
    }
    let ln_f = ln(reg, "dec.ln_f")?;
    let head_w = reg("dec.head.w".into(), vec![d, cfg.image_vocab], Init::Normal(std))?;
    let head_b = reg("dec.head.b".into(), vec![cfg.image_vocab], Init::Zeros)?;
    Ok(Mmot { cfg: cfg.clone(), enc, bos, tok, pos, layers, ln_f, head_w, head_b })
}

impl Mmot {
    /// Architecture plus freshly initialised parameters.
    pub fn init<T: Real>(cfg: &ModelConfig, rng: &mut RngState) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = build(cfg, &mut |name, shape, init| {
            let t = match init {
                Init::Normal(std) => randn(&shape, std, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::one()),
            };
            store.register(name, t)
        })?;
        Ok((model, store))
    }

    /// Resolves parameter handles in an existing store, checking names and shapes.
    pub fn bind<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let mut seen = 0;
        let model = build(cfg, &mut |name, shape, _| {
            let id = store.id(&name).ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            seen += 1;
            Ok(id)
        })?;
        if seen != store.len() {
            return Err(Error::contract(format!("store has {} parameters, model uses {seen}", store.len())));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn ln<T: Real>(&self, g: &Graph<T>, x: Var, ids: LnIds) -> Result<Var> {
        g.layer_norm(x, g.param(ids.g), g.param(ids.b), LN_EPS)
    }

    /// Returns the projected output and the raw attention node.
    fn attend<T: Real>(&self, g: &Graph<T>, q_in: Var, kv_in: Var, ids: AttnIds, mask: &AttnMask<T>) -> Result<(Var, Var)> {
        let q = g.matmul(q_in, g.param(ids.wq))?;
        let k = g.matmul(kv_in, g.param(ids.wk))?;
        let v = g.matmul(kv_in, g.param(ids.wv))?;
        let a = g.attention(q, k, v, self.cfg.heads, mask)?;
        Ok((g.matmul(a, g.param(ids.wo))?, a))
    }

    fn ffn<T: Real>(&self, g: &Graph<T>, x: Var, ids: FfnIds) -> Result<Var> {
        let h = g.linear(x, g.param(ids.w1), Some(g.param(ids.b1)))?;
        g.linear(g.gelu(h), g.param(ids.w2), Some(g.param(ids.b2)))
    }

    /// `l_m x d_model` encoding of one condition sequence.
    pub fn encode_modality<T: Real>(&self, g: &Graph<T>, seq: &TokenSequence) -> Result<Var> {
        let m = self
            .cfg
            .modality_index(seq.modality)
            .ok_or_else(|| Error::contract(format!("modality {} not in model", seq.modality)))?;
        let spec = &self.cfg.modalities[m];
        let l = seq.tokens.len();
        if l == 0 || l > spec.max_len {
            return Err(Error::contract(format!("{} sequence length {l} outside 1..={}", seq.modality, spec.max_len)));
        }
        let ids = &self.enc[m];
        let positions: Vec<usize> = (0..l).collect();
        let mut x = g.add(g.embedding(g.param(ids.tok), &seq.tokens)?, g.embedding(g.param(ids.pos), &positions)?)?;
        for b in &ids.blocks {
            let h = self.ln(g, x, b.ln1)?;
            let (sa, _) = self.attend(g, h, h, b.attn, &AttnMask::None)?;
            x = g.add(x, sa)?;
            let h = self.ln(g, x, b.ln2)?;
            x = g.add(x, self.ffn(g, h, b.ffn)?)?;
        }
        Ok(x)
    }

    /// Encodes every usable modality of `conds`; empty sequences count as absent.
    pub fn encode_conditions<T: Real>(&self, g: &Graph<T>, conds: &ConditionSet) -> Result<(Vec<Option<Var>>, ModalityMask)> {
        let mut enc = vec![None; self.cfg.m()];
        for (kind, seq) in &conds.present {
            let m = self
                .cfg
                .modality_index(*kind)
                .ok_or_else(|| Error::contract(format!("modality {kind} not in model")))?;
            if !seq.tokens.is_empty() {
                enc[m] = Some(self.encode_modality(g, seq)?);
            }
        }
        let mask = ModalityMask { present: enc.iter().map(Option::is_some).collect() };
        Ok((enc, mask))
    }

    /// Teacher-forced decoder: row `i` of the logits scores token `i` given
    /// `tokens[..i]`; the input at row 0 is the learned begin embedding.
    pub fn decoder_forward<T: Real>(
        &self,
        g: &Graph<T>,
        tokens: &[usize],
        enc: &[Option<Var>],
        mask: &ModalityMask,
        trace: bool,
    ) -> Result<DecoderOutput<T>> {
        let cfg = &self.cfg;
        let n = tokens.len();
        if n == 0 || n > cfg.image_len {
            return Err(Error::contract(format!("prefix length {n} outside 1..={}", cfg.image_len)));
        }
        if enc.len() != cfg.m() || mask.present.len() != cfg.m() {
            return Err(Error::contract(format!("expected {} modality slots", cfg.m())));
        }
        for (m, (&p, e)) in mask.present.iter().zip(enc).enumerate() {
            if p && e.is_none() {
                return Err(Error::contract(format!("missing encoding for present modality {}", cfg.modalities[m].kind)));
            }
        }
        let positions: Vec<usize> = (0..n).collect();
        let bos = g.param(self.bos);
        let input = if n == 1 { bos } else { g.concat_rows(&[bos, g.embedding(g.param(self.tok), &tokens[..n - 1])?])? };
        let mut x = g.add(input, g.embedding(g.param(self.pos), &positions)?)?;

        let mut weights = Vec::with_capacity(cfg.n_dec);
        let mut cross_trace = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let h = self.ln(g, x, layer.ln_sa)?;
            let (sa, _) = self.attend(g, h, h, layer.sa, &AttnMask::Causal)?;
            let xn = g.add(x, sa)?;
            let fused = match &layer.fusion {
                FusionIds::Mixer { cross, pulse } => {
                    let mut cands = vec![Some(xn)];
                    let mut maps = Vec::with_capacity(cfg.m());
                    for (m, ids) in cross.iter().enumerate() {
                        match (mask.present[m], enc[m]) {
                            (true, Some(c)) => {
                                let q = self.ln(g, xn, ids.ln_q)?;
                                let kv = self.ln(g, c, ids.ln_c)?;
                                let (ca, a) = self.attend(g, q, kv, ids.attn, &AttnMask::None)?;
                                cands.push(Some(ca));
                                maps.push(if trace { g.attention_probs(a) } else { None });
                            }
                            _ => {
                                cands.push(None);
                                maps.push(None);
                            }
                        }
                    }
                    let p = match *pulse {
                        PulseIds::Projected { w, b } => g.linear(xn, g.param(w), Some(g.param(b)))?,
                        PulseIds::Free(table) => g.embedding(g.param(table), &positions)?,
                    };
                    let mixed = g.mix(p, &cands, cfg.mixer_residual)?;
                    let mut active = vec![true];
                    active.extend(mask.present.iter().copied());
                    weights.push(CombinationWeights {
                        layer: li,
                        weights: g.mix_weights(mixed).expect("mixer node"),
                        active,
                    });
                    cross_trace.push(maps);
                    mixed
                }
                FusionIds::Concat(ids) => {
                    let present: Vec<Var> =
                        enc.iter().zip(&mask.present).filter_map(|(e, &p)| if p { *e } else { None }).collect();
                    cross_trace.push(vec![None; cfg.m()]);
                    if present.is_empty() {
                        xn
                    } else {
                        let c = if present.len() == 1 { present[0] } else { g.concat_rows(&present)? };
                        let q = self.ln(g, xn, ids.ln_q)?;
                        let kv = self.ln(g, c, ids.ln_c)?;
                        let (ca, _) = self.attend(g, q, kv, ids.attn, &AttnMask::None)?;
                        g.add(xn, ca)?
                    }
                }
            };
            let h = self.ln(g, fused, layer.ln_ff)?;
            x = g.add(fused, self.ffn(g, h, layer.ffn)?)?;
        }
        let h = self.ln(g, x, self.ln_f)?;
        let logits = g.linear(h, g.param(self.head_w), Some(g.param(self.head_b)))?;
        let trace = trace.then_some(DecoderTrace { cross: cross_trace });
        Ok(DecoderOutput { logits, weights, trace })
    }

    /// Encodes `conds` and runs the decoder with the mask implied by which
    /// modalities are present.
    pub fn forward_logits<T: Real>(&self, g: &Graph<T>, tokens: &[usize], conds: &ConditionSet, trace: bool) -> Result<DecoderOutput<T>> {
        let (enc, mask) = self.encode_conditions(g, conds)?;
        self.decoder_forward(g, tokens, &enc, &mask, trace)
    }

    /// Mean next-token cross-entropy (nats/token) of `tokens` under `conds`.
    pub fn nll<T: Real>(&self, g: &Graph<T>, tokens: &[usize], conds: &ConditionSet) -> Result<Var> {
        let out = self.forward_logits(g, tokens, conds, false)?;
        g.cross_entropy(out.logits, tokens)
    }
}

/// Per-layer and layer-averaged cross-attention maps from a traced forward.
pub fn extract_attention_maps<T: Real>(model: &Mmot, trace: Option<&DecoderTrace<T>>) -> Result<AttentionMaps<T>> {
    let trace = trace.ok_or_else(|| Error::contract("attention maps need a traced forward (tracing disabled)"))?;
    if model.config().fusion != Fusion::Mixer {
        return Err(Error::contract("per-modality attention maps need mixer fusion"));
    }
    let m = model.config().m();
    let mut averaged = Vec::with_capacity(m);
    for j in 0..m {
        let layers: Vec<&Tensor<T>> = trace.cross.iter().filter_map(|l| l[j].as_ref()).collect();
        averaged.push(layers.first().map(|first| {
            let mut acc = vec![T::zero(); first.len()];
            for t in &layers {
                for (a, &v) in acc.iter_mut().zip(t.data()) {
                    *a += v;
                }
            }
            let inv = T::one() / T::of(layers.len() as f64);
            acc.iter_mut().for_each(|a| *a *= inv);
            Tensor::new(first.shape().to_vec(), acc).expect("map shape")
        }));
    }
    Ok(AttentionMaps {
        modalities: model.config().modalities.iter().map(|s| s.kind).collect(),
        per_layer: trace.cross.clone(),
        averaged,
    })
}
