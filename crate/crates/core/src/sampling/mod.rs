//! Guided autoregressive decoding over parallel token streams.

mod decode;
mod guidance;

pub use decode::{sample_joint, sample_sequence, step_distribution, DivergenceMap, Sample, TokenStreamBatch};
pub use guidance::{
    divergences, guided_logits, jsd, jsd_lambdas, lambdas_from_divergences, softmax, top_k_filter, GuidanceConfig, GuidanceMode,
    JSD_EPS,
};

use crate::data::{ConditionSet, ModalityKind};
use crate::error::Result;
use crate::model::Mmot;
use crate::numerics::{Graph, ParamStore, Real};

/// Probability of every complete token sequence under guided sampling, by
/// enumerating all `V^L` sequences and multiplying per-step probabilities
/// computed with full uncached forwards. Index `i` encodes the sequence in
/// base `V`, first token most significant.
pub fn exact_sequence_distribution<T: Real>(
    model: &Mmot,
    store: &ParamStore<T>,
    conds: &ConditionSet,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let v = model.config().image_vocab;
    let l = model.config().image_len;
    let modalities: Vec<ModalityKind> =
        model.config().modalities.iter().map(|s| s.kind).filter(|&k| conds.get(k).is_some()).collect();
    let mut sets = vec![ConditionSet::empty()];
    sets.extend(modalities.iter().map(|&k| conds.only(k)));
    let next = |prefix: &[usize]| -> Result<Vec<f64>> {
        let mut tokens = prefix.to_vec();
        tokens.push(0);
        let mut rows = Vec::with_capacity(sets.len());
        for set in &sets {
            let g = Graph::new(store);
            let out = model.forward_logits(&g, &tokens, set, false)?;
            rows.push(g.with_value(out.logits, |t| t.row(prefix.len()).iter().map(|x| x.as_f64()).collect::<Vec<f64>>()));
        }
        let uncon = rows.remove(0);
        Ok(step_distribution(&uncon, &rows, cfg, &modalities)?.0)
    };
    let mut probs = vec![1.0; 1];
    let mut prefixes: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..l {
        let mut np = Vec::with_capacity(probs.len() * v);
        let mut nx = Vec::with_capacity(probs.len() * v);
        for (prefix, &p) in prefixes.iter().zip(&probs) {
            let step = next(prefix)?;
            for (t, &q) in step.iter().enumerate() {
                let mut ext = prefix.clone();
                ext.push(t);
                nx.push(ext);
                np.push(p * q);
            }
        }
        probs = np;
        prefixes = nx;
    }
    Ok(probs)
}

#[cfg(test)]
mod tests;
