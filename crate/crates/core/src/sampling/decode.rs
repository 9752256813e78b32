use std::io::Write;

use serde::{Deserialize, Serialize};

use super::guidance::{divergences, guided_logits, lambdas_from_divergences, softmax, top_k_filter, GuidanceConfig, GuidanceMode};
use crate::data::{ConditionSet, ModalityKind};
use crate::error::{Error, Result};
use crate::model::{DecoderSession, Mmot};
use crate::numerics::kernels::argmax;
use crate::numerics::{ParamStore, Real, RngState};
use crate::parallel::{self, Exec};

/// The unconditional stream plus one single-modality stream per present
/// condition, all fed the same committed tokens.
pub struct TokenStreamBatch<'a, T: Real> {
    modalities: Vec<ModalityKind>,
    streams: Vec<DecoderSession<'a, T>>,
}

impl<'a, T: Real> TokenStreamBatch<'a, T> {
    pub fn new(model: &'a Mmot, store: &'a ParamStore<T>, conds: &ConditionSet, exec: Exec) -> Result<Self> {
        let modalities: Vec<ModalityKind> =
            model.config().modalities.iter().map(|s| s.kind).filter(|&k| conds.get(k).is_some()).collect();
        let mut sets = vec![ConditionSet::empty()];
        sets.extend(modalities.iter().map(|&k| conds.only(k)));
        let streams = parallel::map(exec, sets.len(), |i| DecoderSession::new(model, store, &sets[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { modalities, streams })
    }

    /// Condition modalities in stream order (stream `i + 1` is `modalities[i]`).
    pub fn modalities(&self) -> &[ModalityKind] {
        &self.modalities
    }

    pub fn committed(&self) -> &[usize] {
        self.streams[0].committed()
    }

    pub fn is_complete(&self) -> bool {
        self.streams[0].is_complete()
    }

    /// Next-token logits of the unconditional stream and of each conditional stream.
    pub fn logits(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let to64 = |s: &DecoderSession<'a, T>| s.logits().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
        (to64(&self.streams[0]), self.streams[1..].iter().map(to64).collect())
    }

    /// Appends `token` to every stream.
    pub fn commit(&mut self, token: usize, exec: Exec) -> Result<()> {
        parallel::map_mut(exec, &mut self.streams, |_, s| s.commit(token)).into_iter().collect::<Result<Vec<_>>>()?;
        let head = self.streams[0].committed();
        if self.streams.iter().any(|s| s.committed() != head) {
            return Err(Error::contract("token streams diverged"));
        }
        Ok(())
    }
}

/// Per position, per conditional stream: JSD in nats from the unconditional
/// next-token distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMap {
    pub modalities: Vec<ModalityKind>,
    pub values: Vec<Vec<f64>>,
}

impl DivergenceMap {
    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    /// Values of one modality laid out row-major on a `height x width` grid.
    pub fn grid(&self, kind: ModalityKind, height: usize, width: usize) -> Result<Vec<Vec<f64>>> {
        let j = self
            .modalities
            .iter()
            .position(|&k| k == kind)
            .ok_or_else(|| Error::contract(format!("no {kind} stream in divergence map")))?;
        if self.values.len() != height * width {
            return Err(Error::Shape(format!("{} positions do not fill a {height}x{width} grid", self.values.len())));
        }
        Ok((0..height).map(|r| (0..width).map(|c| self.values[r * width + c][j]).collect()).collect())
    }

    /// Long-format CSV: `modality,row,col,jsd`.
    pub fn write_csv<W: Write>(&self, height: usize, width: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["modality", "row", "col", "jsd"])?;
        for &kind in &self.modalities {
            for (r, row) in self.grid(kind, height, width)?.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    w.write_record([kind.name().to_string(), r.to_string(), c.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One decoded image with its per-step guidance record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub modalities: Vec<ModalityKind>,
    /// Scales applied at each step, one per conditional stream.
    pub lambdas: Vec<Vec<f64>>,
    pub divergence: DivergenceMap,
}

/// Guided next-token distribution for the current stream logits, with the
/// step's divergences and scales. Greedy configs return a one-hot vector.
pub fn step_distribution(uncon: &[f64], con: &[Vec<f64>], cfg: &GuidanceConfig, modalities: &[ModalityKind]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = divergences(uncon, con)?;
    let lambdas = match cfg.mode {
        GuidanceMode::Fixed => modalities.iter().map(|&k| cfg.lambda_for(k)).collect(),
        GuidanceMode::Jsd => lambdas_from_divergences(&d, cfg.kappa),
    };
    let mut z = guided_logits(uncon, con, &lambdas)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("guided logits {z:?} with scales {lambdas:?}")));
    }
    let p = if cfg.greedy {
        let mut p = vec![0.0; z.len()];
        p[argmax(&z)] = 1.0;
        p
    } else {
        z.iter_mut().for_each(|v| *v /= cfg.temperature);
        top_k_filter(&mut z, cfg.top_k);
        softmax(&z)
    };
    Ok((p, d, lambdas))
}

/// Decodes one image token sequence under multimodal guidance.
///
/// The only random draw per step is the categorical token choice.
pub fn sample_sequence<T: Real>(
    model: &Mmot,
    store: &ParamStore<T>,
    conds: &ConditionSet,
    cfg: &GuidanceConfig,
    rng: &mut RngState,
    exec: Exec,
) -> Result<Sample> {
    cfg.validate(model.config().image_vocab)?;
    let mut streams = TokenStreamBatch::new(model, store, conds, exec)?;
    let modalities = streams.modalities().to_vec();
    let mut lambdas = Vec::new();
    let mut values = Vec::new();
    while !streams.is_complete() {
        let (uncon, con) = streams.logits();
        let (p, d, l) = step_distribution(&uncon, &con, cfg, &modalities).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("position {}: {msg}", streams.committed().len())),
            other => other,
        })?;
        let token = if cfg.greedy { argmax(&p) } else { rng.categorical(&p) };
        streams.commit(token, exec)?;
        lambdas.push(l);
        values.push(d);
    }
    Ok(Sample {
        tokens: streams.committed().to_vec(),
        divergence: DivergenceMap { modalities: modalities.clone(), values },
        modalities,
        lambdas,
    })
}

/// Decodes from the single stream that attends to every present condition at
/// once. Guidance scales are ignored; temperature, top-k and greedy apply.
pub fn sample_joint<T: Real>(model: &Mmot, store: &ParamStore<T>, conds: &ConditionSet, cfg: &GuidanceConfig, rng: &mut RngState) -> Result<Vec<usize>> {
    cfg.validate(model.config().image_vocab)?;
    let mut s = DecoderSession::new(model, store, conds)?;
    while !s.is_complete() {
        let mut z: Vec<f64> = s.logits().iter().map(|v| v.as_f64()).collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("joint logits at position {}", s.committed().len())));
        }
        let token = if cfg.greedy {
            argmax(&z)
        } else {
            z.iter_mut().for_each(|v| *v /= cfg.temperature);
            top_k_filter(&mut z, cfg.top_k);
            rng.categorical(&softmax(&z))
        };
        s.commit(token)?;
    }
    Ok(s.committed().to_vec())
}
