//! Incremental decoding with cached keys and values.

use super::network::{AttnIds, FfnIds, FusionIds, LnIds, Mmot, PulseIds};
use crate::data::ConditionSet;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, layer_norm_rows};
use crate::numerics::{attention_forward, AttnMask, Graph, ParamId, ParamStore, Real, Tensor, LN_EPS};

struct CrossCache<T> {
    k: Vec<T>,
    v: Vec<T>,
    len: usize,
}

/// One token stream: encodes its conditions once, then produces next-token
/// logits one position at a time. Matches [`Mmot::forward_logits`] row by row.
pub struct DecoderSession<'a, T: Real> {
    model: &'a Mmot,
    store: &'a ParamStore<T>,
    /// `[layer][modality]` for mixer fusion, `[layer][0]` for concat fusion.
    cross: Vec<Vec<Option<CrossCache<T>>>>,
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    committed: Vec<usize>,
    logits: Vec<T>,
    weights: Vec<Vec<T>>,
}

impl<'a, T: Real> DecoderSession<'a, T> {
    pub fn new(model: &'a Mmot, store: &'a ParamStore<T>, conds: &ConditionSet) -> Result<Self> {
        let cfg = model.config();
        let d = cfg.d_model;
        let g = Graph::new(store);
        let (enc, _) = model.encode_conditions(&g, conds)?;
        let enc: Vec<Option<Tensor<T>>> = enc.iter().map(|e| e.map(|v| g.value(v))).collect();
        drop(g);
        let project = |c: &[T], rows: usize, ln: LnIds, a: AttnIds| -> CrossCache<T> {
            let c = layer_norm_rows(c, d, store.value(ln.g).data(), store.value(ln.b).data(), T::of(LN_EPS));
            CrossCache {
                k: kernels::linear(&c, rows, d, store.value(a.wk).data(), d, None),
                v: kernels::linear(&c, rows, d, store.value(a.wv).data(), d, None),
                len: rows,
            }
        };
        let mut cross = Vec::with_capacity(cfg.n_dec);
        for layer in &model.layers {
            match &layer.fusion {
                FusionIds::Mixer { cross: ids, .. } => {
                    cross.push(
                        ids.iter()
                            .zip(&enc)
                            .map(|(ids, e)| e.as_ref().map(|t| project(t.data(), t.rows(), ids.ln_c, ids.attn)))
                            .collect(),
                    );
                }
                FusionIds::Concat(ids) => {
                    let mut rows = 0;
                    let mut data = Vec::new();
                    for t in enc.iter().flatten() {
                        rows += t.rows();
                        data.extend_from_slice(t.data());
                    }
                    cross.push(vec![(rows > 0).then(|| project(&data, rows, ids.ln_c, ids.attn))]);
                }
            }
        }
        let n = cfg.n_dec;
        let mut s = Self {
            model,
            store,
            cross,
            self_k: vec![Vec::new(); n],
            self_v: vec![Vec::new(); n],
            committed: Vec::new(),
            logits: Vec::new(),
            weights: Vec::new(),
        };
        s.advance(None)?;
        Ok(s)
    }

    /// Logits for the next position.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Mixer weights of the last computed position, one row per layer.
    pub fn last_weights(&self) -> &[Vec<T>] {
        &self.weights
    }

    pub fn committed(&self) -> &[usize] {
        &self.committed
    }

    pub fn is_complete(&self) -> bool {
        self.committed.len() >= self.model.config().image_len
    }

    /// Appends `token` and computes logits for the following position.
    pub fn commit(&mut self, token: usize) -> Result<()> {
        let cfg = self.model.config();
        if token >= cfg.image_vocab {
            return Err(Error::Index { what: "image vocabulary".into(), index: token, size: cfg.image_vocab });
        }
        if self.is_complete() {
            return Err(Error::contract("sequence already complete"));
        }
        self.committed.push(token);
        if self.committed.len() < cfg.image_len {
            self.advance(Some(token))?;
        } else {
            self.logits.clear();
        }
        Ok(())
    }

    fn p(&self, id: ParamId) -> &'a [T] {
        self.store.value(id).data()
    }

    fn ln(&self, x: &[T], ids: LnIds) -> Vec<T> {
        layer_norm_rows(x, x.len(), self.p(ids.g), self.p(ids.b), T::of(LN_EPS))
    }

    fn ffn(&self, x: &[T], ids: FfnIds) -> Vec<T> {
        let cfg = self.model.config();
        let (d, f) = (cfg.d_model, cfg.ff_width());
        let mut h = kernels::linear(x, 1, d, self.p(ids.w1), f, Some(self.p(ids.b1)));
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        kernels::linear(&h, 1, f, self.p(ids.w2), d, Some(self.p(ids.b2)))
    }

    fn cross_attend(&self, x: &[T], q_ln: LnIds, a: AttnIds, cache: &CrossCache<T>) -> Result<Vec<T>> {
        let d = self.model.config().d_model;
        let q = kernels::linear(&self.ln(x, q_ln), 1, d, self.p(a.wq), d, None);
        let (o, _) = attention_forward(&q, &cache.k, &cache.v, 1, cache.len, d, self.model.config().heads, &AttnMask::None)?;
        Ok(kernels::linear(o.data(), 1, d, self.p(a.wo), d, None))
    }

    fn advance(&mut self, token: Option<usize>) -> Result<()> {
        let model = self.model;
        let cfg = model.config();
        let d = cfg.d_model;
        let pos = self.committed.len();
        let mut x: Vec<T> = match token {
            None => self.p(model.bos).to_vec(),
            Some(t) => self.store.value(model.tok).row(t).to_vec(),
        };
        for (v, &p) in x.iter_mut().zip(self.store.value(model.pos).row(pos)) {
            *v += p;
        }
        self.weights.clear();
        for (li, layer) in model.layers.iter().enumerate() {
            let h = self.ln(&x, layer.ln_sa);
            let q = kernels::linear(&h, 1, d, self.p(layer.sa.wq), d, None);
            let k = kernels::linear(&h, 1, d, self.p(layer.sa.wk), d, None);
            let v = kernels::linear(&h, 1, d, self.p(layer.sa.wv), d, None);
            self.self_k[li].extend(k);
            self.self_v[li].extend(v);
            let (a, _) = attention_forward(&q, &self.self_k[li], &self.self_v[li], 1, pos + 1, d, cfg.heads, &AttnMask::None)?;
            let sa = kernels::linear(a.data(), 1, d, self.p(layer.sa.wo), d, None);
            let xn: Vec<T> = x.iter().zip(&sa).map(|(&a, &b)| a + b).collect();
            let fused = match &layer.fusion {
                FusionIds::Mixer { cross, pulse } => {
                    let mut cands: Vec<Option<Vec<T>>> = vec![None; cfg.m()];
                    for (m, ids) in cross.iter().enumerate() {
                        if let Some(cache) = &self.cross[li][m] {
                            cands[m] = Some(self.cross_attend(&xn, ids.ln_q, ids.attn, cache)?);
                        }
                    }
                    let p = match *pulse {
                        PulseIds::Projected { w, b } => kernels::linear(&xn, 1, d, self.p(w), d, Some(self.p(b))),
                        PulseIds::Free(table) => self.store.value(table).row(pos).to_vec(),
                    };
                    let mut rows: Vec<Option<&[T]>> = vec![Some(&xn)];
                    rows.extend(cands.iter().map(|c| c.as_deref()));
                    let mut w = vec![T::zero(); rows.len()];
                    let mut out = vec![T::zero(); d];
                    kernels::mix_row(&p, &rows, cfg.mixer_residual, &mut w, &mut out);
                    self.weights.push(w);
                    out
                }
                FusionIds::Concat(ids) => match &self.cross[li][0] {
                    Some(cache) => {
                        let ca = self.cross_attend(&xn, ids.ln_q, ids.attn, cache)?;
                        xn.iter().zip(&ca).map(|(&a, &b)| a + b).collect()
                    }
                    None => xn,
                },
            };
            let h = self.ln(&fused, layer.ln_ff);
            let f = self.ffn(&h, layer.ffn);
            x = fused.iter().zip(&f).map(|(&a, &b)| a + b).collect();
        }
        let h = self.ln(&x, model.ln_f);
        self.logits = kernels::linear(&h, 1, d, self.p(model.head_w), cfg.image_vocab, Some(self.p(model.head_b)));
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("decoder logits at position {pos}")));
        }
        Ok(())
    }
}
