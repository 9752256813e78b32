//! Stage-1 vector-quantised autoencoder over one-hot palette patches.

use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, SceneKnobs, SceneSpec};
use crate::error::{Error, Result};
use crate::numerics::{kernels, randn, Graph, ParamId, ParamStore, Real, RngState, Tensor, Var};
use crate::training::{AdamW, OptimizerConfig};

/// Learned codewords plus selection counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook<T> {
    /// `K x n_z`.
    pub entries: Tensor<T>,
    pub usage: Vec<u64>,
}

impl<T: Real> Codebook<T> {
    pub fn new(entries: Tensor<T>) -> Self {
        let k = entries.rows();
        Self { entries, usage: vec![0; k] }
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    /// Nearest codeword per row of `z_hat` (`L x n_z`); ties go to the lowest index.
    pub fn quantize(&mut self, z_hat: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        let ids = nearest_codewords(&self.entries, z_hat)?;
        for &i in &ids {
            self.usage[i] += 1;
        }
        let zq = self.lookup(&ids);
        Ok((ids, zq))
    }

    pub fn lookup(&self, ids: &[usize]) -> Tensor<T> {
        let d = self.dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(self.entries.row(i));
        }
        Tensor::new(vec![ids.len(), d], out).expect("lookup shape")
    }

    /// Shannon entropy (nats) of the usage distribution.
    pub fn usage_entropy(&self) -> f64 {
        let total: u64 = self.usage.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.usage
            .iter()
            .filter(|&&u| u > 0)
            .map(|&u| {
                let p = u as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }
}

pub fn nearest_codewords<T: Real>(entries: &Tensor<T>, z_hat: &Tensor<T>) -> Result<Vec<usize>> {
    let d = entries.cols();
    if z_hat.cols() != d || entries.shape().len() != 2 {
        return Err(Error::Dimension { op: "quantize", lhs: z_hat.shape().to_vec(), rhs: entries.shape().to_vec() });
    }
    Ok((0..z_hat.rows())
        .map(|r| {
            let z = z_hat.row(r);
            let mut best = 0;
            let mut best_d = T::infinity();
            for k in 0..entries.rows() {
                let dist: T = entries.row(k).iter().zip(z).map(|(&e, &x)| (e - x) * (e - x)).sum();
                if dist < best_d {
                    best = k;
                    best_d = dist;
                }
            }
            best
        })
        .collect())
}

/// `||x - x_hat||^2 + ||sg[z_hat] - z_q||^2 + beta ||sg[z_q] - z_hat||^2`.
pub fn vq_loss<T: Real>(g: &Graph<T>, x: Var, x_hat: Var, z_hat: Var, z_q: Var, beta: f64) -> Result<Var> {
    let rec = g.sum_squares(g.sub(x, x_hat)?);
    let codebook = g.sum_squares(g.sub(g.detach(z_hat), z_q)?);
    let commit = g.sum_squares(g.sub(g.detach(z_q), z_hat)?);
    g.add(g.add(rec, codebook)?, g.scale(commit, T::of(beta)))
}

/// One-hot palette patches, raster order over patches; each row is
/// `patch*patch` cells (raster within the patch) of `palette` indicators.
pub fn scene_patches<T: Real>(scene: &SceneSpec, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || scene.height % patch != 0 || scene.width % patch != 0 {
        return Err(Error::contract(format!("patch {patch} does not tile {}x{}", scene.height, scene.width)));
    }
    let dim = patch * patch * scene.palette;
    let (ph, pw) = (scene.height / patch, scene.width / patch);
    let mut out = vec![T::zero(); ph * pw * dim];
    for pr in 0..ph {
        for pc in 0..pw {
            let row = &mut out[(pr * pw + pc) * dim..(pr * pw + pc + 1) * dim];
            for dr in 0..patch {
                for dc in 0..patch {
                    let v = scene.cell(pr * patch + dr, pc * patch + dc);
                    row[(dr * patch + dc) * scene.palette + v] = T::one();
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, dim], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub patch: usize,
    pub codebook_size: usize,
    pub n_z: usize,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub scenes_per_epoch: usize,
    pub batch_scenes: usize,
    pub held_out: usize,
    /// Held-out per-element reconstruction MSE must end below this.
    pub mse_threshold: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            patch: 2,
            codebook_size: 32,
            n_z: 8,
            beta: 0.25,
            lr: 3e-3,
            epochs: 20,
            scenes_per_epoch: 512,
            batch_scenes: 16,
            held_out: 256,
            mse_threshold: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqReport {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub held_out_mse: f64,
    pub cell_accuracy: f64,
    pub usage_entropy: f64,
    pub reseeded: usize,
    pub held_out_scenes: usize,
}

/// Patch-linear encoder `E`, decoder `D` and codebook.
#[derive(Clone, Debug)]
pub struct VqAutoencoder {
    cfg: VqConfig,
    palette: usize,
    pub store: ParamStore<f32>,
    enc_w: ParamId,
    enc_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    code: ParamId,
    pub usage: Vec<u64>,
}

impl VqAutoencoder {
    pub fn new(cfg: VqConfig, palette: usize, rng: &mut RngState) -> Result<Self> {
        let dim = cfg.patch * cfg.patch * palette;
        let mut store = ParamStore::new();
        let enc_w = store.register("vq.enc.w", randn(&[dim, cfg.n_z], 1.0 / (dim as f64).sqrt(), rng))?;
        let enc_b = store.register("vq.enc.b", Tensor::zeros(&[cfg.n_z]))?;
        let dec_w = store.register("vq.dec.w", randn(&[cfg.n_z, dim], 1.0 / (cfg.n_z as f64).sqrt(), rng))?;
        let dec_b = store.register("vq.dec.b", Tensor::zeros(&[dim]))?;
        let code = store.register("vq.codebook", randn(&[cfg.codebook_size, cfg.n_z], 1.0, rng))?;
        let usage = vec![0; cfg.codebook_size];
        Ok(Self { cfg, palette, store, enc_w, enc_b, dec_w, dec_b, code, usage })
    }

    pub fn config(&self) -> &VqConfig {
        &self.cfg
    }

    pub fn codebook(&self) -> Codebook<f32> {
        Codebook { entries: self.store.value(self.code).clone(), usage: self.usage.clone() }
    }

    pub fn encode(&self, patches: &Tensor<f32>) -> Tensor<f32> {
        let dim = patches.cols();
        let w = self.store.value(self.enc_w);
        let data = kernels::linear(patches.data(), patches.rows(), dim, w.data(), self.cfg.n_z, Some(self.store.value(self.enc_b).data()));
        Tensor::new(vec![patches.rows(), self.cfg.n_z], data).expect("encode shape")
    }

    pub fn decode(&self, zq: &Tensor<f32>) -> Tensor<f32> {
        let dim = self.store.value(self.dec_b).len();
        let w = self.store.value(self.dec_w);
        let data = kernels::linear(zq.data(), zq.rows(), self.cfg.n_z, w.data(), dim, Some(self.store.value(self.dec_b).data()));
        Tensor::new(vec![zq.rows(), dim], data).expect("decode shape")
    }

    /// Codebook ids of the scene's patches; increments usage.
    pub fn tokenize(&mut self, scene: &SceneSpec) -> Result<Vec<usize>> {
        let z = self.encode(&scene_patches(scene, self.cfg.patch)?);
        let ids = nearest_codewords(self.store.value(self.code), &z)?;
        for &i in &ids {
            self.usage[i] += 1;
        }
        Ok(ids)
    }

    /// Per-cell palette argmax of the decoded patches.
    pub fn reconstruct(&self, scene: &SceneSpec) -> Result<Vec<usize>> {
        let p = self.cfg.patch;
        let z = self.encode(&scene_patches(scene, p)?);
        let ids = nearest_codewords(self.store.value(self.code), &z)?;
        let xhat = self.decode(&Codebook::new(self.store.value(self.code).clone()).lookup(&ids));
        let pw = scene.width / p;
        let mut grid = vec![0; scene.height * scene.width];
        for (pi, row) in (0..xhat.rows()).map(|i| (i, xhat.row(i))) {
            let (pr, pc) = (pi / pw, pi % pw);
            for dr in 0..p {
                for dc in 0..p {
                    let off = (dr * p + dc) * self.palette;
                    grid[(pr * p + dr) * scene.width + pc * p + dc] = kernels::argmax(&row[off..off + self.palette]);
                }
            }
        }
        Ok(grid)
    }

    /// One pass over `scenes_per_epoch` fresh scenes; returns the last batch
    /// loss and the number of re-seeded codewords.
    pub fn train_epoch(
        &mut self,
        opt: &mut AdamW<f32>,
        knobs: &SceneKnobs,
        data_rng: &mut RngState,
        reseed_rng: &mut RngState,
    ) -> Result<(f64, usize)> {
        let cfg = self.cfg.clone();
        let ocfg = OptimizerConfig { lr: cfg.lr, weight_decay: 0.0, grad_clip: 0.0, warmup: 0, ..Default::default() };
        let dim = cfg.patch * cfg.patch * knobs.palette;
        let batches = cfg.scenes_per_epoch.div_ceil(cfg.batch_scenes.max(1));
        let mut epoch_usage = vec![0u64; cfg.codebook_size];
        let mut outputs: Vec<Vec<f32>> = Vec::new();
        let mut last = f64::NAN;
        for _ in 0..batches {
            let mut rows = Vec::new();
            for _ in 0..cfg.batch_scenes {
                let s = generate_scene(data_rng, knobs)?;
                rows.extend(scene_patches::<f32>(&s, cfg.patch)?.into_data());
            }
            let patches = Tensor::new(vec![rows.len() / dim, dim], rows)?;
            let g = Graph::new(&self.store);
            let (loss, ids) = self.batch_loss(&g, &patches)?;
            last = g.scalar(loss)?.as_f64();
            if !last.is_finite() {
                return Err(Error::NonFinite(format!("vq loss {last} after {} updates", opt.t)));
            }
            for &i in &ids {
                epoch_usage[i] += 1;
                self.usage[i] += 1;
            }
            let z = self.encode(&patches);
            let code = self.store.value(self.code);
            let err: Vec<f64> = (0..z.rows())
                .map(|r| z.row(r).iter().zip(code.row(ids[r])).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum())
                .collect();
            outputs.push(z.row(reseed_rng.categorical(&err)).to_vec());
            let grads = g.backward(loss)?.params;
            drop(g);
            opt.step(&mut self.store, &grads, cfg.lr, &ocfg);
        }
        let entries = &mut self.store.get_mut(self.code).value;
        let mut reseeded = 0;
        for (k, &u) in epoch_usage.iter().enumerate() {
            if u == 0 && !outputs.is_empty() {
                let src = &outputs[reseed_rng.below(outputs.len())];
                entries.data_mut()[k * cfg.n_z..(k + 1) * cfg.n_z].copy_from_slice(src);
                reseeded += 1;
            }
        }
        Ok((last, reseeded))
    }

    /// Autoencoder loss on a batch of patch rows; returns the loss node and
    /// the selected ids.
    fn batch_loss(&self, g: &Graph<f32>, patches: &Tensor<f32>) -> Result<(Var, Vec<usize>)> {
        let x = g.constant(patches.clone());
        let zhat = g.linear(x, g.param(self.enc_w), Some(g.param(self.enc_b)))?;
        let ids = nearest_codewords(self.store.value(self.code), &g.value(zhat))?;
        let zq = g.embedding(g.param(self.code), &ids)?;
        let zst = g.straight_through(zhat, g.value(zq))?;
        let xhat = g.linear(zst, g.param(self.dec_w), Some(g.param(self.dec_b)))?;
        let loss = vq_loss(g, x, xhat, zhat, zq, self.cfg.beta)?;
        Ok((g.scale(loss, 1.0 / patches.rows() as f32), ids))
    }
}

/// Trains the stage-1 autoencoder on freshly generated scenes.
///
/// Codewords never selected during an epoch are re-seeded to a random encoder
/// output from that epoch, drawn in proportion to its quantisation error.
pub fn train_vq_autoencoder(cfg: &VqConfig, knobs: &SceneKnobs) -> Result<(VqAutoencoder, VqReport)> {
    knobs.validate()?;
    let root = RngState::new(cfg.seed);
    let mut init_rng = root.split(0);
    let mut vq = VqAutoencoder::new(cfg.clone(), knobs.palette, &mut init_rng)?;
    let mut opt = AdamW::new(&vq.store);
    let held: Vec<SceneSpec> = {
        let mut rng = root.split(1);
        (0..cfg.held_out).map(|_| generate_scene(&mut rng, knobs)).collect::<Result<_>>()?
    };

    let mut data_rng = root.split(2);
    let mut reseed_rng = root.split(3);
    // Initialise codewords from encoder outputs so every entry starts in range.
    {
        let scenes: Vec<SceneSpec> = (0..cfg.codebook_size).map(|_| generate_scene(&mut data_rng, knobs)).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for s in &scenes {
            let z = vq.encode(&scene_patches(s, cfg.patch)?);
            rows.push(z.row(reseed_rng.below(z.rows())).to_vec());
        }
        let entries = Tensor::from_rows(&rows)?;
        vq.store.get_mut(vq.code).value = entries;
    }

    let mut last_loss = f64::NAN;
    let mut reseeded = 0;
    for _ in 0..cfg.epochs {
        let (loss, n) = vq.train_epoch(&mut opt, knobs, &mut data_rng, &mut reseed_rng)?;
        last_loss = loss;
        reseeded += n;
    }

    let (mut correct, mut total, mut sq, mut n) = (0usize, 0usize, 0.0f64, 0usize);
    for s in &held {
        let grid = vq.reconstruct(s)?;
        correct += grid.iter().zip(&s.grid).filter(|(a, b)| a == b).count();
        total += grid.len();
        let x = scene_patches::<f32>(s, cfg.patch)?;
        let z = vq.encode(&x);
        let ids = nearest_codewords(vq.store.value(vq.code), &z)?;
        let xhat = vq.decode(&vq.codebook().lookup(&ids));
        sq += x.data().iter().zip(xhat.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
        n += x.len();
    }
    let held_out_mse = if n > 0 { sq / n as f64 } else { 0.0 };
    let report = VqReport {
        epochs: cfg.epochs,
        final_train_loss: last_loss,
        held_out_mse,
        cell_accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        usage_entropy: vq.codebook().usage_entropy(),
        reseeded,
        held_out_scenes: held.len(),
    };
    Ok((vq, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_codes() -> Codebook<f64> {
        Codebook::new(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap())
    }

    #[test]
    fn nearest_and_tie_rules() {
        let mut cb = two_codes();
        let z = Tensor::from_rows(&[vec![0.2, 0.1], vec![1.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let (ids, zq) = cb.quantize(&z).unwrap();
        assert_eq!(ids, vec![0, 1, 0]);
        assert_eq!(zq.row(1), &[1.0, 1.0]);
        assert_eq!(cb.usage, vec![2, 1]);
        assert_eq!(cb.usage.iter().sum::<u64>(), 3);
    }

    #[test]
    fn quantize_is_idempotent_on_codewords() {
        let mut rng = RngState::new(5);
        let mut cb = Codebook::new(randn::<f64>(&[16, 4], 1.0, &mut rng));
        let z = randn::<f64>(&[40, 4], 1.0, &mut rng);
        let (ids, zq) = cb.quantize(&z).unwrap();
        let (again, zq2) = cb.quantize(&zq).unwrap();
        assert_eq!(ids, again);
        assert_eq!(zq, zq2);
    }

    #[test]
    fn zero_loss_at_perfect_reconstruction() {
        let g = Graph::<f64>::detached();
        let x = g.variable(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let z = g.variable(Tensor::from_rows(&[vec![0.3, 0.4]]).unwrap());
        let l = vq_loss(&g, x, x, z, z, 0.25).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn commitment_gradient_is_two_beta_diff() {
        let beta = 0.25;
        let zh = [0.3, -0.7, 1.1];
        let zq = [0.1, 0.2, 0.9];
        let g = Graph::<f64>::detached();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let zhat = g.variable(Tensor::new(vec![1, 3], zh.to_vec()).unwrap());
        let zqv = g.variable(Tensor::new(vec![1, 3], zq.to_vec()).unwrap());
        let l = vq_loss(&g, x, x, zhat, zqv, beta).unwrap();
        let grads = g.backward(l).unwrap();
        let gz = grads.wrt(zhat).unwrap();
        let commit = |v: &[f64]| -> f64 { beta * v.iter().zip(&zq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() };
        let h = 1e-5;
        for i in 0..3 {
            assert!((gz[i] - 2.0 * beta * (zh[i] - zq[i])).abs() < 1e-12);
            let (mut p, mut m) = (zh, zh);
            p[i] += h;
            m[i] -= h;
            let fd = (commit(&p) - commit(&m)) / (2.0 * h);
            assert!((gz[i] - fd).abs() < 1e-8, "{} vs {fd}", gz[i]);
        }
        let gq = grads.wrt(zqv).unwrap();
        for i in 0..3 {
            assert!((gq[i] - 2.0 * (zq[i] - zh[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut rng = RngState::new(8);
        let g = Graph::<f64>::detached();
        let zhat = g.variable(randn(&[5, 4], 1.0, &mut rng));
        let zq_val = randn::<f64>(&[5, 4], 1.0, &mut rng);
        let w = g.constant(randn(&[4, 6], 1.0, &mut rng));
        let t = g.constant(randn(&[5, 6], 1.0, &mut rng));
        let st = g.straight_through(zhat, zq_val.clone()).unwrap();
        let loss = g.sum_squares(g.sub(g.matmul(st, w).unwrap(), t).unwrap());
        let a = g.backward(loss).unwrap();

        let g2 = Graph::<f64>::detached();
        let zq = g2.variable(zq_val);
        let w2 = g2.constant(g.value(w));
        let t2 = g2.constant(g.value(t));
        let loss2 = g2.sum_squares(g2.sub(g2.matmul(zq, w2).unwrap(), t2).unwrap());
        let b = g2.backward(loss2).unwrap();
        assert_eq!(g.scalar(loss).unwrap(), g2.scalar(loss2).unwrap());
        assert_eq!(a.wrt(zhat).unwrap(), b.wrt(zq).unwrap());
    }

    #[test]
    fn patch_count_matches_shape() {
        let s = generate_scene(&mut RngState::new(1), &SceneKnobs::default()).unwrap();
        let p = scene_patches::<f32>(&s, 2).unwrap();
        assert_eq!(p.shape(), &[16, 24]);
        assert!(p.data().iter().sum::<f32>() == 64.0);
    }

    #[test]
    fn dead_codeword_is_reseeded() {
        let cfg = VqConfig { epochs: 1, scenes_per_epoch: 16, batch_scenes: 8, held_out: 4, ..Default::default() };
        let knobs = SceneKnobs::default();
        let (mut vq, _) = train_vq_autoencoder(&cfg, &knobs).unwrap();
        // A codeword parked far from every encoder output is never selected.
        let n_z = cfg.n_z;
        vq.store.get_mut(vq.code).value.data_mut()[..n_z].copy_from_slice(&vec![1e6f32; n_z]);
        let mut opt = AdamW::new(&vq.store);
        let (_, reseeded) =
            vq.train_epoch(&mut opt, &knobs, &mut RngState::new(70), &mut RngState::new(71)).unwrap();
        assert!(reseeded >= 1);
        assert!(vq.store.value(vq.code).row(0).iter().all(|v| v.abs() < 1e3));
    }
}
