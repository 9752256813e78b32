//! `MMOT1` checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `MMOT1\n`, `u64` length + config text, `u64` length + JSON meta,
//! `u32` tensor count, then per tensor `u32` name length, name, `u32` rank,
//! `u64` dims, `f32` values; finally the marker `END\n`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Mmot;
use crate::numerics::{ParamStore, RngSnapshot, RngState, Tensor};
use crate::training::{AdamW, StepRecord, SubsetScheduler, TrainState};

pub const MAGIC: &[u8; 6] = b"MMOT1\n";
const END: &[u8; 4] = b"END\n";

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    scheduler: SubsetScheduler,
    rng: RngSnapshot,
    adam_t: u64,
    history: Vec<StepRecord>,
}

/// Serialized run: its config plus everything needed to resume.
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} length {v} too large")))
    }

    fn str(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32("tensor name length")?;
        let name = self.str(n, "tensor name")?.to_string();
        let rank = self.u32("tensor rank")?;
        let shape = (0..rank).map(|_| self.u64("tensor dim")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
        let raw = self.take(bytes, &format!("tensor `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let meta = Meta {
            step: s.step,
            scheduler: s.scheduler.clone(),
            rng: s.rng.snapshot(),
            adam_t: s.opt.t,
            history: s.history.clone(),
        };
        let mut out = MAGIC.to_vec();
        put_bytes(&mut out, self.config.to_text()?.as_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&meta)?);
        out.extend_from_slice(&((3 * s.store.len()) as u32).to_le_bytes());
        for p in s.store.iter() {
            put_tensor(&mut out, &p.name, p.value.shape(), p.value.data());
        }
        for (tag, moments) in [("m", &s.opt.m), ("v", &s.opt.v)] {
            for (p, mom) in s.store.iter().zip(moments) {
                put_tensor(&mut out, &format!("adam.{tag}.{}", p.name), p.value.shape(), mom);
            }
        }
        out.extend_from_slice(END);
        Ok(out)
    }

    /// Rejects anything but a complete, self-consistent file.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n = r.u64("config")?;
        let config = RunConfig::parse(r.str(n, "config")?)?;
        let n = r.u64("meta")?;
        let meta: Meta = serde_json::from_slice(r.take(n, "meta")?).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
        let count = r.u32("tensor count")?;
        if count % 3 != 0 {
            return Err(Error::Checkpoint(format!("tensor count {count} is not params plus two moment tables")));
        }
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        if r.take(END.len(), "end marker")? != END || r.pos != bytes.len() {
            return Err(Error::Checkpoint("missing end marker or trailing bytes".into()));
        }

        let k = count / 3;
        let mut store = ParamStore::new();
        for (name, t) in &tensors[..k] {
            store.register(name.clone(), t.clone())?;
        }
        let moments = |tag: &str, block: &[(String, Tensor<f32>)]| -> Result<Vec<Vec<f32>>> {
            store
                .iter()
                .zip(block)
                .map(|(p, (name, t))| {
                    if *name != format!("adam.{tag}.{}", p.name) || t.shape() != p.value.shape() {
                        return Err(Error::Checkpoint(format!("moment `{name}` does not match parameter `{}`", p.name)));
                    }
                    Ok(t.data().to_vec())
                })
                .collect()
        };
        let opt = AdamW { m: moments("m", &tensors[k..2 * k])?, v: moments("v", &tensors[2 * k..])?, t: meta.adam_t };
        let model_cfg = config.model_config();
        let model = Mmot::bind(&model_cfg, &store).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if meta.scheduler.subsets() != 1 << model_cfg.m() {
            return Err(Error::Checkpoint("scheduler does not match the model's modalities".into()));
        }
        let state = TrainState {
            model,
            store,
            opt,
            optim: config.optim.clone(),
            train: config.train.clone(),
            scheduler: meta.scheduler,
            rng: RngState::restore(meta.rng),
            step: meta.step,
            history: meta.history,
        };
        Ok(Self { config, state })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
