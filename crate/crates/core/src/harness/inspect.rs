//! Map dumps for one example: combination weights, cross-attention and
//! divergence along the example's own image tokens.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::data::{Example, ModalityKind};
use crate::error::Result;
use crate::model::{extract_attention_maps, AttentionMaps, CombinationWeights, Fusion, Mmot};
use crate::numerics::{Graph, ParamStore};
use crate::parallel::Exec;
use crate::sampling::{divergences, DivergenceMap, TokenStreamBatch};

pub struct Inspection {
    pub modalities: Vec<ModalityKind>,
    pub weights: Vec<CombinationWeights<f64>>,
    /// `None` under concatenation fusion.
    pub attention: Option<AttentionMaps<f64>>,
    pub divergence: DivergenceMap,
}

/// Teacher-forced divergence between each single-modality stream and the
/// unconditional stream at every position of `tokens`.
pub fn teacher_forced_divergence(model: &Mmot, store: &ParamStore<f64>, ex: &Example, exec: Exec) -> Result<DivergenceMap> {
    let mut streams = TokenStreamBatch::new(model, store, &ex.conditions, exec)?;
    let mut values = Vec::with_capacity(ex.image.tokens.len());
    for &t in &ex.image.tokens {
        let (u, c) = streams.logits();
        values.push(divergences(&u, &c)?);
        streams.commit(t, exec)?;
    }
    Ok(DivergenceMap { modalities: streams.modalities().to_vec(), values })
}

pub fn inspect(model: &Mmot, store: &ParamStore<f32>, ex: &Example, exec: Exec) -> Result<Inspection> {
    let store = store.cast::<f64>();
    let g = Graph::new(&store);
    let out = model.forward_logits(&g, &ex.image.tokens, &ex.conditions, true)?;
    let attention = match model.config().fusion {
        Fusion::Mixer => Some(extract_attention_maps(model, out.trace.as_ref())?),
        Fusion::Concat => None,
    };
    Ok(Inspection {
        modalities: model.config().modalities.iter().map(|s| s.kind).collect(),
        weights: out.weights,
        attention,
        divergence: teacher_forced_divergence(model, &store, ex, exec)?,
    })
}

impl Inspection {
    /// Mean weight per candidate for every layer; candidate 0 is the image stream.
    pub fn layer_means(&self) -> Vec<Vec<f64>> {
        self.weights
            .iter()
            .map(|w| {
                let (rows, cols) = (w.weights.rows(), w.weights.cols());
                (0..cols).map(|j| (0..rows).map(|i| w.weights.row(i)[j]).sum::<f64>() / rows as f64).collect()
            })
            .collect()
    }

    /// Writes `weights.csv`, `weights_mean.csv`, `attention.csv`,
    /// `attention_received.csv` and `divergence.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path, height: usize, width: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<csv::Writer<BufWriter<File>>> { Ok(csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?))) };
        let names: Vec<&str> = std::iter::once("image").chain(self.modalities.iter().map(|k| k.tag())).collect();

        let mut w = open("weights.csv")?;
        let mut header = vec!["layer", "row", "col"];
        header.extend(&names);
        w.write_record(&header)?;
        for cw in &self.weights {
            for i in 0..cw.weights.rows() {
                let mut rec = vec![cw.layer.to_string(), (i / width).to_string(), (i % width).to_string()];
                rec.extend(cw.weights.row(i).iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;

        let mut w = open("weights_mean.csv")?;
        w.write_record(["layer", "candidate", "mean_weight"])?;
        for (layer, means) in self.layer_means().iter().enumerate() {
            for (name, m) in names.iter().zip(means) {
                w.write_record([layer.to_string(), name.to_string(), m.to_string()])?;
            }
        }
        w.flush()?;

        let mut w = open("attention.csv")?;
        w.write_record(["modality", "query_row", "query_col", "key", "weight"])?;
        let mut r = open("attention_received.csv")?;
        r.write_record(["modality", "row", "col", "mass"])?;
        if let Some(att) = &self.attention {
            for (kind, map) in att.modalities.iter().zip(&att.averaged) {
                let Some(map) = map else { continue };
                for q in 0..map.rows() {
                    for (k, v) in map.row(q).iter().enumerate() {
                        w.write_record([kind.tag().to_string(), (q / width).to_string(), (q % width).to_string(), k.to_string(), v.to_string()])?;
                    }
                }
                if kind.is_grid() && map.cols() == height * width {
                    for k in 0..map.cols() {
                        let mass = (0..map.rows()).map(|q| map.row(q)[k]).sum::<f64>() / map.rows() as f64;
                        r.write_record([kind.tag().to_string(), (k / width).to_string(), (k % width).to_string(), mass.to_string()])?;
                    }
                }
            }
        }
        w.flush()?;
        r.flush()?;

        self.divergence.write_csv(height, width, BufWriter::new(File::create(dir.join("divergence.csv"))?))
    }
}
