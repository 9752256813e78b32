use std::io::Write;

use super::scheduler::SubsetScheduler;
use super::step::{StepRecord, TrainState};
use crate::data::ModalityKind;
use crate::error::{Error, Result};

/// Scheduler state after one history record.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub record: StepRecord,
    pub ema: Vec<f64>,
    pub prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub modalities: Vec<ModalityKind>,
    pub curve: Vec<CurvePoint>,
    pub visits: Vec<u64>,
    pub terminal_ema: Vec<f64>,
    /// Terminal EMA of every visited one-modality subset.
    pub single_modality: Vec<(ModalityKind, f64)>,
    /// Population standard deviation of `single_modality` losses.
    pub spread: f64,
}

/// Population standard deviation; 0 for fewer than two values.
pub fn spread(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Replays the loss history through a fresh scheduler to recover every EMA
/// and probability trajectory.
pub fn convergence_report(state: &TrainState) -> Result<ConvergenceReport> {
    if state.history.is_empty() {
        return Err(Error::contract("no training history"));
    }
    let cfg = state.model.config();
    let mut sched = SubsetScheduler::new(cfg.m(), cfg.image_vocab, state.scheduler.mode);
    sched.min_prob = state.scheduler.min_prob;
    sched.decay = state.scheduler.decay;
    let mut visits = vec![0u64; sched.subsets()];
    let mut curve = Vec::with_capacity(state.history.len());
    for rec in &state.history {
        sched.observe(rec.subset, rec.loss);
        visits[rec.subset as usize] += 1;
        curve.push(CurvePoint { record: *rec, ema: sched.loss_ema.clone(), prob: sched.probabilities()? });
    }
    let modalities: Vec<ModalityKind> = cfg.modalities.iter().map(|s| s.kind).collect();
    let single_modality: Vec<(ModalityKind, f64)> = modalities
        .iter()
        .enumerate()
        .filter(|(j, _)| visits[1 << j] > 0)
        .map(|(j, &k)| (k, sched.loss_ema[1 << j]))
        .collect();
    let values: Vec<f64> = single_modality.iter().map(|(_, v)| *v).collect();
    Ok(ConvergenceReport {
        modalities,
        curve,
        visits,
        terminal_ema: sched.loss_ema,
        spread: spread(&values),
        single_modality,
    })
}

impl ConvergenceReport {
    /// Metrics stream: `step, subset_mask, loss_nats_per_token, ema_0.., prob_0..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.terminal_ema.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "subset_mask".into(), "loss_nats_per_token".into()];
        header.extend((0..n).map(|s| format!("ema_{s}")));
        header.extend((0..n).map(|s| format!("prob_{s}")));
        w.write_record(&header)?;
        for p in &self.curve {
            let mut row = vec![p.record.step.to_string(), p.record.subset.to_string(), p.record.loss.to_string()];
            row.extend(p.ema.iter().map(f64::to_string));
            row.extend(p.prob.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
