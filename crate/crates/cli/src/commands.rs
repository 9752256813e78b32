use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mmot::data::{generate_dataset, read_jsonl, write_jsonl, ConditionSet, Example, ModalityKind};
use mmot::harness::{
    ablate, evaluate, fresh_state, inspect, train_run, write_ablation_csv, write_ppm, Checkpoint, RunConfig, Sampler,
};
use mmot::model::Fusion;
use mmot::numerics::RngState;
use mmot::parallel::{self, Exec};
use mmot::sampling::{sample_sequence, GuidanceConfig};
use mmot::Error;
use serde_json::json;

use crate::{Command, GuidanceFlags};

const PPM_SCALE: usize = 16;

/// 2 for configuration and input errors, 3 for non-finite values, else 1.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Parse { .. }) => 2,
        Some(Error::NonFinite(_)) => 3,
        _ => 1,
    }
}

fn config_error(field: &str, message: impl Into<String>) -> anyhow::Error {
    Error::Config { field: field.into(), message: message.into() }.into()
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, mode, no_mixer, seed, steps, out, resume, log_every } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.train.mode = m.into();
            }
            if no_mixer {
                cfg.model.fusion = Fusion::Concat;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            train(&cfg, resume.as_deref(), log_every)
        }
        Command::Sample { ckpt, conditions, guidance, n, seed, out } => sample(&ckpt, &conditions, &guidance, n, seed, out),
        Command::Eval { ckpt, testset, samples, seed, guidance, out } => eval(&ckpt, &testset, samples, seed, &guidance, out),
        Command::Inspect { ckpt, example, index, out } => inspect_cmd(&ckpt, &example, index, out),
        Command::Ablate { config, out, log_every } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let rows = ablate(&cfg, Exec::Parallel, |mode, r| {
                if log_every > 0 && (r.step + 1) % log_every == 0 {
                    eprintln!("[{}] step {} loss {:.4}", mode.label(), r.step + 1, r.loss);
                }
            })?;
            let path = cfg.out_dir.join("ablation.csv");
            write_ablation_csv(&rows, BufWriter::new(File::create(&path)?))?;
            for row in &rows {
                println!("== {} ({})", row.mode.label(), row.checkpoint.display());
                print!("{}", row.report.summary());
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Generate { config, n, seed, out, conditions_only } => {
            let cfg = RunConfig::load(&config)?;
            let exs = generate_dataset(&cfg.data, n, seed, Exec::Parallel)?;
            if conditions_only {
                let conds: Vec<&ConditionSet> = exs.iter().map(|e| &e.conditions).collect();
                write_jsonl(&out, &conds)?;
            } else {
                write_jsonl(&out, &exs)?;
            }
            println!("wrote {n} records to {}", out.display());
            Ok(())
        }
    }
}

fn train(cfg: &RunConfig, resume: Option<&Path>, log_every: u64) -> Result<()> {
    let state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let mut a = ck.config.clone();
            a.train.steps = cfg.train.steps;
            a.out_dir = cfg.out_dir.clone();
            if a != *cfg {
                return Err(config_error("resume", "checkpoint config differs from the requested run beyond steps and out_dir"));
            }
            ck.state
        }
        None => fresh_state(cfg)?,
    };
    eprintln!(
        "training {} params, mode {}, fusion {:?}, {} steps, seed {}",
        state.store.numel(),
        cfg.train.mode,
        cfg.model.fusion,
        cfg.train.steps,
        cfg.seed
    );
    let start = std::time::Instant::now();
    let state = train_run(cfg, state, Exec::Parallel, |r| {
        if log_every > 0 && (r.step + 1) % log_every == 0 {
            eprintln!("step {:>7} loss {:.4} grad {:.3} lr {:.2e} subset {:?}", r.step + 1, r.loss, r.grad_norm, r.lr, r.subsets);
        }
    })?;
    println!(
        "done: {} steps in {:.1}s, final checkpoint {}",
        state.step,
        start.elapsed().as_secs_f64(),
        cfg.out_dir.join(mmot::harness::FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn guidance_from(base: &GuidanceConfig, flags: &GuidanceFlags) -> Result<GuidanceConfig> {
    let mut g = base.clone();
    if let Some(m) = flags.guidance {
        g.mode = m.into();
    }
    for item in &flags.lambda {
        let (k, v) = item.split_once('=').ok_or_else(|| config_error("lambda", format!("`{item}` is not m=v")))?;
        let kind: ModalityKind = k.trim().parse().map_err(|_| config_error("lambda", format!("unknown modality `{k}`")))?;
        let v: f64 = v.trim().parse().map_err(|_| config_error("lambda", format!("`{v}` is not a number")))?;
        g.lambda.insert(kind, v);
    }
    if let Some(k) = flags.kappa {
        g.kappa = k;
    }
    if let Some(t) = flags.temperature {
        g.temperature = t;
    }
    if let Some(k) = flags.top_k {
        g.top_k = k;
    }
    g.greedy |= flags.greedy;
    Ok(g)
}

fn check_modalities(ck: &Checkpoint, conds: &ConditionSet, what: &str) -> Result<()> {
    let cfg = ck.state.model.config();
    for k in conds.kinds() {
        if cfg.modality_index(k).is_none() {
            return Err(config_error(what, format!("modality `{k}` is not part of this model")));
        }
    }
    conds.validate(&ck.config.data.knobs).map_err(|e| config_error(what, e.to_string()))
}

fn out_dir(out: Option<PathBuf>, ckpt: &Path, name: &str) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(name));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn sample(ckpt: &Path, conditions: &Path, flags: &GuidanceFlags, n: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let ck = load_ckpt(ckpt)?;
    let g = guidance_from(&ck.config.guidance, flags)?;
    g.validate(ck.state.model.config().image_vocab)?;
    let sets: Vec<ConditionSet> = read_jsonl(conditions)?;
    for s in &sets {
        check_modalities(&ck, s, "conditions")?;
    }
    let dir = out_dir(out, ckpt, "samples")?;
    let knobs = &ck.config.data.knobs;
    let (model, store) = (&ck.state.model, &ck.state.store);

    let mut tr = BufWriter::new(File::create(dir.join("transcript.jsonl"))?);
    let lambda: serde_json::Map<String, serde_json::Value> = g.lambda.iter().map(|(k, v)| (k.name().to_string(), json!(v))).collect();
    let header = json!({
        "header": {
            "checkpoint": ckpt.display().to_string(),
            "step": ck.state.step,
            "guidance": g.mode.to_string(),
            "lambda": lambda,
            "default_lambda": g.default_lambda,
            "kappa": g.kappa,
            "temperature": g.temperature,
            "top_k": g.top_k,
            "greedy": g.greedy,
            "n": n,
            "seed": seed,
            "sets": sets.len(),
        }
    });
    writeln!(tr, "{header}")?;
    for (si, set) in sets.iter().enumerate() {
        let draws = parallel::map(Exec::Parallel, n, |j| {
            let mut rng = RngState::derive(seed, (si * n + j) as u64);
            sample_sequence(model, store, set, &g, &mut rng, Exec::Sequential)
        });
        for (j, s) in draws.into_iter().enumerate() {
            let s = s?;
            let stem = format!("set{si:03}_sample{j:03}");
            write_ppm(&s.tokens, knobs.height, knobs.width, PPM_SCALE, BufWriter::new(File::create(dir.join(format!("{stem}.ppm")))?))?;
            if !s.divergence.is_empty() {
                s.divergence.write_csv(knobs.height, knobs.width, BufWriter::new(File::create(dir.join(format!("{stem}_divergence.csv")))?))?;
            }
            let mean_lambda: Vec<f64> = (0..s.modalities.len())
                .map(|m| s.lambdas.iter().map(|l| l[m]).sum::<f64>() / s.lambdas.len().max(1) as f64)
                .collect();
            let line = json!({
                "set": si,
                "sample": j,
                "modalities": s.modalities.iter().map(|k| k.name()).collect::<Vec<_>>(),
                "mean_lambda": mean_lambda,
                "tokens": s.tokens,
            });
            writeln!(tr, "{line}")?;
        }
    }
    tr.flush()?;
    println!("wrote {} samples to {}", sets.len() * n, dir.display());
    Ok(())
}

fn eval(ckpt: &Path, testset: &Path, samples: Option<usize>, seed: u64, flags: &GuidanceFlags, out: Option<PathBuf>) -> Result<()> {
    let ck = load_ckpt(ckpt)?;
    let exs: Vec<Example> = read_jsonl(testset)?;
    if exs.is_empty() {
        return Err(config_error("testset", format!("{} holds no examples", testset.display())));
    }
    for e in &exs {
        check_modalities(&ck, &e.conditions, "testset")?;
    }
    let guided = flags.guidance.is_some() || !flags.lambda.is_empty() || flags.kappa.is_some();
    let g = guidance_from(&ck.config.guidance, flags)?;
    let sampler = if guided { Sampler::Guided(g) } else { Sampler::Joint { temperature: g.temperature } };
    let samples = samples.unwrap_or(ck.config.eval.samples);
    let report = evaluate(&ck.state.model, &ck.state.store, &exs, &ck.config.data.knobs, samples, &sampler, seed, Exec::Parallel)?;
    let dir = out_dir(out, ckpt, "eval")?;
    report.write_csv(BufWriter::new(File::create(dir.join("eval.csv"))?))?;
    std::fs::write(dir.join("eval.txt"), report.summary())?;
    print!("{}", report.summary());
    println!("wrote {}", dir.join("eval.csv").display());
    Ok(())
}

fn inspect_cmd(ckpt: &Path, example: &Path, index: usize, out: Option<PathBuf>) -> Result<()> {
    let ck = load_ckpt(ckpt)?;
    let exs: Vec<Example> = read_jsonl(example)?;
    let ex = exs.get(index).ok_or_else(|| config_error("example", format!("no example at index {index} ({} in file)", exs.len())))?;
    check_modalities(&ck, &ex.conditions, "example")?;
    let knobs = &ck.config.data.knobs;
    let ins = inspect(&ck.state.model, &ck.state.store, ex, Exec::Parallel)?;
    let dir = out_dir(out, ckpt, "inspect")?;
    ins.write_dir(&dir, knobs.height, knobs.width)?;
    write_ppm(&ex.image.decode_exact()?, knobs.height, knobs.width, PPM_SCALE, BufWriter::new(File::create(dir.join("image.ppm"))?))?;
    for (layer, means) in ins.layer_means().iter().enumerate() {
        let cells: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
        println!("layer {layer}: {}", cells.join(" "));
    }
    println!("wrote maps to {}", dir.display());
    Ok(())
}
