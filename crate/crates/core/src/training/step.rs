use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW, OptimizerConfig};
use super::scheduler::{SchedulerMode, SubsetScheduler, DEFAULT_EMA_DECAY, DEFAULT_MIN_PROB};
use crate::data::{generate_dataset, ConditionSet, DataConfig, Example, ModalityKind};
use crate::error::{Error, Result};
use crate::model::{ModalityMask, ModelConfig, Mmot};
use crate::numerics::{Graph, ParamGrads, ParamStore, RngState, Var};
use crate::parallel::{self, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: SchedulerMode,
    pub steps: u64,
    pub min_prob: f64,
    pub ema_decay: f64,
    /// Draw a subset per example instead of one for the whole batch.
    pub per_example_subsets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: SchedulerMode::Balanced,
            steps: 2000,
            min_prob: DEFAULT_MIN_PROB,
            ema_decay: DEFAULT_EMA_DECAY,
            per_example_subsets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        let n = 1usize << modalities;
        if !(0.0..=1.0 / n as f64).contains(&self.min_prob) {
            return Err(Error::config("train.min_prob", format!("must lie in [0, 1/{n}]")));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Conditions of `ex` restricted to the modalities set in `mask`.
pub fn subset_conditions(model: &Mmot, ex: &Example, mask: &ModalityMask) -> ConditionSet {
    let keep: Vec<ModalityKind> = model
        .config()
        .modalities
        .iter()
        .zip(&mask.present)
        .filter(|(_, &p)| p)
        .map(|(s, _)| s.kind)
        .collect();
    ex.conditions.restrict(&keep)
}

/// Teacher-forced image-token NLL under the condition subset `mask`, in nats
/// per token averaged over positions and examples.
///
/// Modalities in `mask` that an example does not carry are treated as masked.
pub fn mmb_loss<T: crate::numerics::Real>(g: &Graph<T>, model: &Mmot, batch: &[Example], mask: &ModalityMask) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let l = model.nll(g, &ex.image.tokens, &subset_conditions(model, ex, mask))?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(g.scale(total.expect("nonempty"), T::of(1.0 / batch.len() as f64)))
}

/// Mean NLL over `examples` under `mask`, without gradients.
pub fn subset_nll(model: &Mmot, store: &ParamStore<f32>, examples: &[Example], mask: &ModalityMask, exec: Exec) -> Result<f64> {
    let losses: Result<Vec<f64>> = parallel::map(exec, examples.len(), |i| {
        let g = Graph::new(store);
        let ex = &examples[i];
        let l = model.nll(&g, &ex.image.tokens, &subset_conditions(model, ex, mask))?;
        Ok(g.scalar(l)? as f64)
    })
    .into_iter()
    .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Fresh training batch for `step`, independent of worker count.
pub fn batch_for_step(cfg: &DataConfig, seed: u64, step: u64, size: usize, exec: Exec) -> Result<Vec<Example>> {
    generate_dataset(cfg, size, RngState::derive(seed, step).next_u64(), exec)
}

/// One observed subset loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub subset: u32,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    /// One entry for whole-batch assignment, otherwise one per example.
    pub subsets: Vec<u32>,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Mmot,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub scheduler: SubsetScheduler,
    pub rng: RngState,
    pub step: u64,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    /// Parameters come from the stream `(seed, 0)`, subset draws from `(seed, 1)`.
    pub fn new(model_cfg: &ModelConfig, optim: OptimizerConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        model_cfg.validate()?;
        optim.validate()?;
        train.validate(model_cfg.m())?;
        let (model, store) = Mmot::init::<f32>(model_cfg, &mut RngState::derive(seed, 0))?;
        let mut scheduler = SubsetScheduler::new(model_cfg.m(), model_cfg.image_vocab, train.mode);
        scheduler.min_prob = train.min_prob;
        scheduler.decay = train.ema_decay;
        Ok(Self {
            opt: AdamW::new(&store),
            model,
            store,
            optim,
            train,
            scheduler,
            rng: RngState::derive(seed, 1),
            step: 0,
            history: Vec::new(),
        })
    }
}

struct ExampleGrad {
    loss: f64,
    grads: ParamGrads<f32>,
}

fn example_grad(model: &Mmot, store: &ParamStore<f32>, ex: &Example, mask: &ModalityMask) -> Result<ExampleGrad> {
    let g = Graph::new(store);
    let l = model.nll(&g, &ex.image.tokens, &subset_conditions(model, ex, mask))?;
    let loss = g.scalar(l)? as f64;
    let grads = g.backward(l)?.params;
    Ok(ExampleGrad { loss, grads })
}

/// Samples a subset, takes one clipped AdamW step on the balanced loss and
/// updates the sampled subset's running loss.
///
/// Per-example gradients may be computed on worker threads; they are summed in
/// example order, so the result does not depend on the thread count.
pub fn train_step(state: &mut TrainState, batch: &[Example], exec: Exec) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let m = state.model.config().m();
    let masks: Vec<ModalityMask> = if state.train.per_example_subsets {
        batch.iter().map(|_| state.scheduler.sample(&mut state.rng)).collect::<Result<_>>()?
    } else {
        vec![state.scheduler.sample(&mut state.rng)?; batch.len()]
    };
    let (model, store) = (&state.model, &state.store);
    let results: Vec<Result<ExampleGrad>> = parallel::map(exec, batch.len(), |i| example_grad(model, store, &batch[i], &masks[i]));
    let mut grads = ParamGrads::empty(state.store.len());
    let mut losses = Vec::with_capacity(batch.len());
    for r in results {
        let r = r?;
        losses.push(r.loss);
        grads.add_assign(&r.grads);
    }
    let loss = losses.iter().sum::<f64>() / batch.len() as f64;
    if !loss.is_finite() {
        let bits = masks[0].bits();
        return Err(Error::NonFinite(format!(
            "training loss {loss} at step {}, subset {bits:0m$b}, seed {}",
            state.step,
            state.rng.seed()
        )));
    }
    grads.scale(1.0 / batch.len() as f32);
    let grad_norm = clip_grad_norm(&mut grads, state.optim.grad_clip);
    let lr = state.optim.lr_at(state.step);
    state.opt.step(&mut state.store, &grads, lr, &state.optim);

    let subsets: Vec<u32> = if state.train.per_example_subsets {
        for (mask, &l) in masks.iter().zip(&losses) {
            state.scheduler.observe(mask.bits(), l);
            state.history.push(StepRecord { step: state.step, subset: mask.bits(), loss: l });
        }
        masks.iter().map(ModalityMask::bits).collect()
    } else {
        let bits = masks[0].bits();
        state.scheduler.observe(bits, loss);
        state.history.push(StepRecord { step: state.step, subset: bits, loss });
        vec![bits]
    };
    let report = LossReport { step: state.step, subsets, loss, grad_norm, lr };
    state.step += 1;
    Ok(report)
}
