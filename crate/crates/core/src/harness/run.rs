//! Training driver with checkpoints and the four-row ablation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::{evaluate, EvalReport, Sampler};
use crate::data::{generate_dataset, Example};
use crate::error::Result;
use crate::model::Fusion;
use crate::parallel::Exec;
use crate::training::{batch_for_step, convergence_report, train_step, LossReport, SchedulerMode, TrainState};

pub const FINAL_CHECKPOINT: &str = "final.mmot";
pub const METRICS_CSV: &str = "metrics.csv";

pub fn fresh_state(cfg: &RunConfig) -> Result<TrainState> {
    TrainState::new(&cfg.model_config(), cfg.optim.clone(), cfg.train.clone(), cfg.seed)
}

fn write_metrics(state: &TrainState, path: &Path) -> Result<()> {
    if state.history.is_empty() {
        return Ok(());
    }
    let mut out = BufWriter::new(File::create(path)?);
    convergence_report(state)?.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Runs `state` up to `cfg.train.steps`, checkpointing every
/// `cfg.checkpoint_every` steps into `cfg.out_dir`. The metrics stream is
/// rewritten at each checkpoint and on failure.
pub fn train_run(cfg: &RunConfig, mut state: TrainState, exec: Exec, mut log: impl FnMut(&LossReport)) -> Result<TrainState> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics = cfg.out_dir.join(METRICS_CSV);
    let save = |state: &TrainState, name: &str| -> Result<()> {
        Checkpoint { config: cfg.clone(), state: state.clone() }.save(&cfg.out_dir.join(name))?;
        write_metrics(state, &metrics)
    };
    while state.step < cfg.train.steps {
        let batch = batch_for_step(&cfg.data, cfg.seed, state.step, cfg.optim.batch_size, exec)?;
        match train_step(&mut state, &batch, exec) {
            Ok(r) => log(&r),
            Err(e) => {
                write_metrics(&state, &metrics)?;
                return Err(e);
            }
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.train.steps {
            save(&state, &format!("step{:07}.mmot", state.step))?;
        }
    }
    save(&state, FINAL_CHECKPOINT)?;
    Ok(state)
}

/// Held-out examples for `cfg`, independent of the training stream.
pub fn held_out(cfg: &RunConfig, exec: Exec) -> Result<Vec<Example>> {
    generate_dataset(&cfg.data, cfg.eval.examples, cfg.eval.seed, exec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    Base,
    Mixer,
    Balanced,
    Guidance,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::Base, AblationMode::Mixer, AblationMode::Balanced, AblationMode::Guidance];

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Base => "base",
            AblationMode::Mixer => "+mixer",
            AblationMode::Balanced => "+balanced",
            AblationMode::Guidance => "+guidance",
        }
    }

    /// Training config of the row; `+guidance` reuses the `+balanced` run.
    pub fn config(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let (fusion, mode, dir) = match self {
            AblationMode::Base => (Fusion::Concat, SchedulerMode::Uniform, "base"),
            AblationMode::Mixer => (Fusion::Mixer, SchedulerMode::Uniform, "mixer"),
            AblationMode::Balanced | AblationMode::Guidance => (Fusion::Mixer, SchedulerMode::Balanced, "balanced"),
        };
        cfg.model.fusion = fusion;
        cfg.train.mode = mode;
        cfg.out_dir = base.out_dir.join(dir);
        cfg
    }

    pub fn sampler(self, cfg: &RunConfig) -> Sampler {
        match self {
            AblationMode::Guidance => Sampler::Guided(cfg.guidance.clone()),
            _ => Sampler::Joint { temperature: cfg.guidance.temperature },
        }
    }
}

pub struct AblationRow {
    pub mode: AblationMode,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

/// Trains the three distinct runs and evaluates all four rows on one
/// held-out set with one sampling seed.
pub fn ablate(base: &RunConfig, exec: Exec, mut log: impl FnMut(AblationMode, &LossReport)) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let test = held_out(base, exec)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for mode in AblationMode::ALL {
        let cfg = mode.config(base);
        let ckpt = cfg.out_dir.join(FINAL_CHECKPOINT);
        let state = match rows.iter().find(|r| r.checkpoint == ckpt) {
            Some(_) => Checkpoint::load(&ckpt)?.state,
            None => train_run(&cfg, fresh_state(&cfg)?, exec, |r| log(mode, r))?,
        };
        let report = evaluate(&state.model, &state.store, &test, &cfg.data.knobs, cfg.eval.samples, &mode.sampler(&cfg), base.seed, exec)?;
        rows.push(AblationRow { mode, checkpoint: ckpt, report });
    }
    Ok(rows)
}

/// Comparison table: `mode,subset,nll,accuracy,...` with one row per mode
/// and subset; accuracy is filled on the full-condition row of each mode.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "subset", "nll", "accuracy", "frechet", "n_nll", "n_samples", "seed"])?;
    for row in rows {
        let r = &row.report;
        let full = (1u32 << r.modalities.len()) - 1;
        let acc = if r.accuracy.is_empty() {
            f64::NAN
        } else {
            r.accuracy.iter().map(|a| a.accuracy).sum::<f64>() / r.accuracy.len() as f64
        };
        for n in &r.nll {
            let (a, f) = if n.subset == full { (acc.to_string(), r.frechet.to_string()) } else { (String::new(), String::new()) };
            w.write_record([
                row.mode.label().to_string(),
                r.subset_name(n.subset),
                n.nll.to_string(),
                a,
                f,
                n.examples.to_string(),
                r.frechet_samples.0.to_string(),
                r.seed.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneKnobs;
    use crate::error::Error;

    fn tiny(dir: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.knobs = SceneKnobs { height: 4, width: 4, palette: 4, min_objects: 1, max_objects: 2, min_side: 1, max_side: 3 };
        cfg.model.d_model = 8;
        cfg.model.heads = 2;
        cfg.model.n_enc = 1;
        cfg.model.n_dec = 1;
        cfg.model.ff_mult = 2;
        cfg.optim.batch_size = 2;
        cfg.train.steps = 4;
        cfg.checkpoint_every = 2;
        cfg.eval.examples = 4;
        cfg.eval.samples = 4;
        cfg.out_dir = std::env::temp_dir().join(format!("mmot-run-{dir}-{}", std::process::id()));
        cfg
    }

    #[test]
    fn run_writes_checkpoints_and_metrics() {
        let cfg = tiny("train");
        let mut seen = 0;
        let state = train_run(&cfg, fresh_state(&cfg).unwrap(), Exec::Sequential, |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        assert!(cfg.out_dir.join("step0000002.mmot").exists());
        let back = Checkpoint::load(&cfg.out_dir.join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(back.state.step, 4);
        assert_eq!(back.config, cfg);
        assert_eq!(back.state.history, state.history);
        let metrics = std::fs::read_to_string(cfg.out_dir.join(METRICS_CSV)).unwrap();
        assert_eq!(metrics.lines().count(), 5);
        std::fs::remove_dir_all(&cfg.out_dir).unwrap();
    }

    #[test]
    fn resumed_run_equals_straight_run() {
        let cfg = tiny("resume");
        let straight = train_run(&cfg, fresh_state(&cfg).unwrap(), Exec::Sequential, |_| {}).unwrap();
        let mid = Checkpoint::load(&cfg.out_dir.join("step0000002.mmot")).unwrap();
        let resumed = train_run(&cfg, mid.state, Exec::Sequential, |_| {}).unwrap();
        let bits = |s: &TrainState| s.store.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&straight), bits(&resumed));
        assert_eq!(straight.history, resumed.history);
        std::fs::remove_dir_all(&cfg.out_dir).unwrap();
    }

    #[test]
    fn nan_loss_is_reported_with_metrics_kept() {
        let cfg = tiny("nan");
        let mut state = fresh_state(&cfg).unwrap();
        let id = state.store.id("dec.head.b").unwrap();
        state.store.get_mut(id).value.data_mut()[0] = f32::NAN;
        assert!(matches!(train_run(&cfg, state, Exec::Sequential, |_| {}), Err(Error::NonFinite(_))));
        std::fs::remove_dir_all(&cfg.out_dir).unwrap();
    }

    #[test]
    fn ablation_modes_differ_only_where_intended() {
        let base = tiny("modes");
        let b = AblationMode::Base.config(&base);
        let m = AblationMode::Mixer.config(&base);
        let bal = AblationMode::Balanced.config(&base);
        let g = AblationMode::Guidance.config(&base);
        assert_eq!((b.model.fusion, b.train.mode), (Fusion::Concat, SchedulerMode::Uniform));
        assert_eq!(RunConfig { model: b.model.clone(), out_dir: b.out_dir.clone(), ..m.clone() }, b);
        assert_eq!(RunConfig { train: m.train.clone(), out_dir: m.out_dir.clone(), ..bal.clone() }, m);
        assert_eq!(g, bal);
        assert!(matches!(AblationMode::Guidance.sampler(&g), Sampler::Guided(_)));
        assert!(matches!(AblationMode::Balanced.sampler(&g), Sampler::Joint { .. }));
    }

    #[test]
    fn ablation_emits_four_rows_with_shared_seed() {
        let mut base = tiny("ablate");
        base.train.steps = 2;
        base.checkpoint_every = 0;
        let rows = ablate(&base, Exec::Sequential, |_, _| {}).unwrap();
        assert_eq!(rows.iter().map(|r| r.mode).collect::<Vec<_>>(), AblationMode::ALL.to_vec());
        assert!(rows.iter().all(|r| r.report.seed == base.seed));
        assert_eq!(rows[2].checkpoint, rows[3].checkpoint);
        assert_eq!(rows[2].report.nll, rows[3].report.nll);
        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mode,subset,nll,accuracy,"));
        assert_eq!(text.lines().count(), 1 + 4 * 16);
        std::fs::remove_dir_all(&base.out_dir).unwrap();
    }
}
