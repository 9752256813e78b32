//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is also a valid topological order. [`Graph::backward`] walks
//! the tape in reverse and returns gradients for every parameter leaf and every
//! leaf created with [`Graph::variable`].

use std::cell::RefCell;
use std::collections::HashMap;

use super::kernels::{self, gemm, View, MASKED_THRESHOLD, MASK_VALUE};
use super::{ParamGrads, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Additive attention mask.
#[derive(Clone, Debug)]
pub enum AttnMask<T> {
    None,
    /// Query `i` sees keys `j <= i + (lk - lq)`.
    Causal,
    /// `lq x lk` tensor of `0` (keep) or [`MASK_VALUE`] (drop).
    Additive(Tensor<T>),
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, T),
    AddConst(Var),
    StraightThrough(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Mix { pulse: Var, cands: Vec<Option<Var>>, weights: Vec<T>, residual: bool },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for one forward pass.
pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: RefCell<Vec<Node<T>>>,
    param_vars: RefCell<HashMap<usize, Var>>,
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ParamGrads<T>,
    leaves: HashMap<usize, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf created with [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }
}

fn shape2(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension { op, lhs: s.to_vec(), rhs: vec![] }),
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), nodes: RefCell::new(Vec::new()), param_vars: RefCell::new(HashMap::new()) }
    }

    /// A graph with no parameter store (only constants and variables).
    pub fn detached() -> Self {
        Self { params: None, nodes: RefCell::new(Vec::new()), param_vars: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Cloned value of a node.
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        self.with_value(v, |t| {
            if t.len() == 1 {
                Ok(t.data()[0])
            } else {
                Err(Error::contract(format!("expected scalar, got shape {:?}", t.shape())))
            }
        })
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id.0) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let value = store.value(id).clone();
        let v = self.push(value, Op::Param(id.0), true);
        self.param_vars.borrow_mut().insert(id.0, v);
        v
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Stop-gradient copy.
    pub fn detach(&self, x: Var) -> Var {
        let t = self.value(x);
        self.constant(t)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let op = if trans_b { "matmul_bt" } else { "matmul" };
            let (m, k) = shape2(ta, op)?;
            let (br, bc) = shape2(tb, op)?;
            let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
            if k != kb {
                return Err(Error::Dimension { op, lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
            }
            let mut out = vec![T::zero(); m * n];
            let bv = if trans_b { View::tr(tb.data(), k) } else { View::rm(tb.data(), n) };
            gemm(m, k, n, T::one(), View::rm(ta.data(), k), bv, T::zero(), &mut out, n);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, self.rg(&[a, b])))
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m x k) * b^T` with `b` of shape `n x k`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension { op, lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), self.rg(&[a, b])))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            let c = tx.cols();
            if tb.len() != c {
                return Err(Error::Dimension { op: "add_row", lhs: tx.shape().to_vec(), rhs: tb.shape().to_vec() });
            }
            let mut d = tx.data().to_vec();
            for row in d.chunks_exact_mut(c) {
                for (v, &b) in row.iter_mut().zip(tb.data()) {
                    *v += b;
                }
            }
            Tensor::new(tx.shape().to_vec(), d)?
        };
        Ok(self.push(t, Op::AddRow { x, bias }, self.rg(&[x, bias])))
    }

    /// `x * w + b` for `w` of shape `in x out`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let t = self.with_value(x, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect()).expect("same shape")
        });
        self.push(t, Op::Scale(x, c), self.rg(&[x]))
    }

    /// `x + c` where `c` carries no gradient.
    pub fn add_const(&self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if tx.shape() != c.shape() {
                return Err(Error::Dimension { op: "add_const", lhs: tx.shape().to_vec(), rhs: c.shape().to_vec() });
            }
            Tensor::new(tx.shape().to_vec(), tx.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect())?
        };
        Ok(self.push(t, Op::AddConst(x), self.rg(&[x])))
    }

    /// Forward value `value`, gradient passed to `x` unchanged.
    pub fn straight_through(&self, x: Var, value: Tensor<T>) -> Result<Var> {
        let shape = self.shape(x);
        if shape != value.shape() {
            return Err(Error::Dimension { op: "straight_through", lhs: shape, rhs: value.shape().to_vec() });
        }
        Ok(self.push(value, Op::StraightThrough(x), self.rg(&[x])))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let t = self.with_value(x, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| kernels::gelu(v)).collect()).expect("same shape")
        });
        self.push(t, Op::Gelu(x), self.rg(&[x]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let t = self.with_value(x, |t| {
            let mut d = t.data().to_vec();
            for row in d.chunks_exact_mut(t.cols()) {
                kernels::softmax_in_place(row);
            }
            Tensor::new(t.shape().to_vec(), d).expect("same shape")
        });
        self.push(t, Op::Softmax(x), self.rg(&[x]))
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (t, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let c = tx.cols();
            if tg.len() != c || tb.len() != c {
                return Err(Error::Dimension { op: "layer_norm", lhs: tx.shape().to_vec(), rhs: tg.shape().to_vec() });
            }
            let mut xhat = vec![T::zero(); tx.len()];
            let mut rstd = Vec::with_capacity(tx.rows());
            for (xr, hr) in tx.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)) {
                rstd.push(kernels::normalize_row(xr, hr, T::of(eps)));
            }
            let mut y = xhat.clone();
            for row in y.chunks_exact_mut(c) {
                for ((v, &g), &b) in row.iter_mut().zip(tg.data()).zip(tb.data()) {
                    *v = *v * g + b;
                }
            }
            (Tensor::new(tx.shape().to_vec(), y)?, xhat, rstd)
        };
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, self.rg(&[x, gain, bias])))
    }

    /// Gathers rows of `table` (`vocab x d`).
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            let (vocab, d) = shape2(tt, "embedding")?;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Index { what: "embedding table".into(), index: id, size: vocab });
                }
                out.extend_from_slice(tt.row(id));
            }
            Tensor::new(vec![ids.len(), d], out)?
        };
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, self.rg(&[table])))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of nothing"));
        }
        let t = {
            let nodes = self.nodes.borrow();
            let c = nodes[parts[0].0].value.cols();
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                let tp = &nodes[p.0].value;
                if tp.cols() != c {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: nodes[parts[0].0].value.shape().to_vec(),
                        rhs: tp.shape().to_vec(),
                    });
                }
                rows += tp.rows();
                out.extend_from_slice(tp.data());
            }
            Tensor::new(vec![rows, c], out)?
        };
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), self.rg(parts)))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`: `lq x d`, `k`/`v`: `lk x d`; the model width is split into `heads`
    /// contiguous column blocks, each attended independently.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask<T>) -> Result<Var> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let (lq, d) = shape2(tq, "attention")?;
            let (lk, dk) = shape2(tk, "attention")?;
            if dk != d || tv.shape() != tk.shape() {
                return Err(Error::Dimension { op: "attention", lhs: tq.shape().to_vec(), rhs: tk.shape().to_vec() });
            }
            if heads == 0 || d % heads != 0 {
                return Err(Error::contract(format!("width {d} not divisible by {heads} heads")));
            }
            attention_forward(tq.data(), tk.data(), tv.data(), lq, lk, d, heads, mask)?
        };
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Head-averaged attention probabilities (`lq x lk`) of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let Op::Attention { q, k, heads, probs, .. } = &nodes[v.0].op else { return None };
        let lq = nodes[q.0].value.rows();
        let lk = nodes[k.0].value.rows();
        let mut avg = vec![T::zero(); lq * lk];
        for h in 0..*heads {
            for (a, &p) in avg.iter_mut().zip(&probs[h * lq * lk..(h + 1) * lq * lk]) {
                *a += p;
            }
        }
        let inv = T::one() / T::of(*heads as f64);
        avg.iter_mut().for_each(|a| *a *= inv);
        Tensor::new(vec![lq, lk], avg).ok()
    }

    /// Token mixer: per position, softmax over candidate scores `pulse . F_j / sqrt(d)`
    /// followed by the weighted candidate sum.
    ///
    /// `cands[0]` is the self-stream and must be present; `None` entries are
    /// masked candidates and receive exactly zero weight. With `residual` the
    /// self-stream passes through unscaled: `X + sum_{j>0} w_j F_j`.
    pub fn mix(&self, pulse: Var, cands: &[Option<Var>], residual: bool) -> Result<Var> {
        let Some(Some(_)) = cands.first() else {
            return Err(Error::contract("mixer requires the self-stream candidate"));
        };
        let (out, weights) = {
            let nodes = self.nodes.borrow();
            let tp = &nodes[pulse.0].value;
            let (l, d) = shape2(tp, "mix")?;
            for c in cands.iter().flatten() {
                if nodes[c.0].value.shape() != tp.shape() {
                    return Err(Error::Dimension { op: "mix", lhs: tp.shape().to_vec(), rhs: nodes[c.0].value.shape().to_vec() });
                }
            }
            let n = cands.len();
            let mut weights = vec![T::zero(); l * n];
            let mut out = vec![T::zero(); l * d];
            let mut rows: Vec<Option<&[T]>> = Vec::with_capacity(n);
            for i in 0..l {
                rows.clear();
                rows.extend(cands.iter().map(|c| c.map(|c| nodes[c.0].value.row(i))));
                kernels::mix_row(
                    &tp.data()[i * d..(i + 1) * d],
                    &rows,
                    residual,
                    &mut weights[i * n..(i + 1) * n],
                    &mut out[i * d..(i + 1) * d],
                );
            }
            (Tensor::new(vec![l, d], out)?, weights)
        };
        let mut deps = vec![pulse];
        deps.extend(cands.iter().flatten());
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Mix { pulse, cands: cands.to_vec(), weights, residual }, rg))
    }

    /// Combination weights (`l x n_candidates`) of a mixer node.
    pub fn mix_weights(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let Op::Mix { cands, weights, .. } = &nodes[v.0].op else { return None };
        Tensor::new(vec![weights.len() / cands.len(), cands.len()], weights.clone()).ok()
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].value;
            let (l, v) = shape2(tl, "cross_entropy")?;
            if targets.len() != l {
                return Err(Error::Dimension { op: "cross_entropy", lhs: tl.shape().to_vec(), rhs: vec![targets.len()] });
            }
            if l == 0 {
                return Err(Error::contract("cross entropy over zero positions"));
            }
            let mut probs = tl.data().to_vec();
            let mut total = T::zero();
            for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
                if t >= v {
                    return Err(Error::Index { what: "target vocabulary".into(), index: t, size: v });
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
                total += lse - row[t];
                for z in row.iter_mut() {
                    *z = (*z - lse).exp();
                }
            }
            (total / T::of(l as f64), probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            self.rg(&[logits]),
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data().iter().copied().sum::<T>());
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data().iter().copied().sum::<T>() / T::of(t.len() as f64));
        self.push(Tensor::scalar(s), Op::Mean(x), self.rg(&[x]))
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn sum_squares(&self, x: Var) -> Var {
        let s = self.with_value(x, |t| t.data().iter().map(|&v| v * v).sum::<T>());
        self.push(Tensor::scalar(s), Op::SumSquares(x), self.rg(&[x]))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let n_params = self.params.map_or(0, |p| p.len());
        let mut out = Gradients { params: ParamGrads::empty(n_params), leaves: HashMap::new() };
        if !nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let len = |v: Var| nodes[v.0].value.len();
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        out.leaves.insert(i, g);
                    }
                }
                Op::Param(pid) => {
                    let slot = out.params.slot(*pid);
                    match slot {
                        Some(s) => s.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                &Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = node.value.shape()[1];
                    if rg(a) {
                        let ga = acc(&mut grads, a, m * k);
                        if trans_b {
                            gemm(m, n, k, T::one(), View::rm(&g, n), View::rm(tb.data(), k), T::one(), ga, k);
                        } else {
                            gemm(m, n, k, T::one(), View::rm(&g, n), View::tr(tb.data(), n), T::one(), ga, k);
                        }
                    }
                    if rg(b) {
                        let gb = acc(&mut grads, b, k * n);
                        if trans_b {
                            gemm(n, m, k, T::one(), View::tr(&g, n), View::rm(ta.data(), k), T::one(), gb, k);
                        } else {
                            gemm(k, m, n, T::one(), View::tr(ta.data(), k), View::rm(&g, n), T::one(), gb, n);
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for x in [a, b] {
                        if rg(x) {
                            acc(&mut grads, x, g.len()).iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                        }
                    }
                }
                &Op::Sub(a, b) => {
                    if rg(a) {
                        acc(&mut grads, a, g.len()).iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                    }
                    if rg(b) {
                        acc(&mut grads, b, g.len()).iter_mut().zip(&g).for_each(|(s, &d)| *s -= d);
                    }
                }
                &Op::Mul(a, b) => {
                    if rg(a) {
                        let vb = val(b);
                        acc(&mut grads, a, g.len()).iter_mut().zip(&g).zip(vb).for_each(|((s, &d), &y)| *s += d * y);
                    }
                    if rg(b) {
                        let va = val(a);
                        acc(&mut grads, b, g.len()).iter_mut().zip(&g).zip(va).for_each(|((s, &d), &x)| *s += d * x);
                    }
                }
                &Op::AddRow { x, bias } => {
                    if rg(x) {
                        acc(&mut grads, x, g.len()).iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                    }
                    if rg(bias) {
                        let c = len(bias);
                        let gb = acc(&mut grads, bias, c);
                        for row in g.chunks_exact(c) {
                            gb.iter_mut().zip(row).for_each(|(s, &d)| *s += d);
                        }
                    }
                }
                &Op::Scale(x, c) => {
                    if rg(x) {
                        acc(&mut grads, x, g.len()).iter_mut().zip(&g).for_each(|(s, &d)| *s += d * c);
                    }
                }
                &Op::AddConst(x) | &Op::StraightThrough(x) => {
                    if rg(x) {
                        acc(&mut grads, x, g.len()).iter_mut().zip(&g).for_each(|(s, &d)| *s += d);
                    }
                }
                &Op::Gelu(x) => {
                    if rg(x) {
                        let vx = val(x);
                        acc(&mut grads, x, g.len())
                            .iter_mut()
                            .zip(&g)
                            .zip(vx)
                            .for_each(|((s, &d), &z)| *s += d * kernels::gelu_grad(z));
                    }
                }
                &Op::Softmax(x) => {
                    if rg(x) {
                        let c = node.value.cols();
                        let y = node.value.data();
                        let gx = acc(&mut grads, x, g.len());
                        for ((gr, yr), sr) in g.chunks_exact(c).zip(y.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                            let dotp = kernels::dot(gr, yr);
                            for ((s, &d), &p) in sr.iter_mut().zip(gr).zip(yr) {
                                *s += p * (d - dotp);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let c = node.value.cols();
                    let gv = val(*gain);
                    if rg(*gain) {
                        let gg = acc(&mut grads, *gain, c);
                        for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ((s, &d), &h) in gg.iter_mut().zip(gr).zip(hr) {
                                *s += d * h;
                            }
                        }
                    }
                    if rg(*bias) {
                        let gb = acc(&mut grads, *bias, c);
                        for gr in g.chunks_exact(c) {
                            gb.iter_mut().zip(gr).for_each(|(s, &d)| *s += d);
                        }
                    }
                    if rg(*x) {
                        let gx = acc(&mut grads, *x, g.len());
                        let inv_c = T::one() / T::of(c as f64);
                        let mut dxhat = vec![T::zero(); c];
                        for (r, ((gr, hr), sr)) in
                            g.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(gx.chunks_exact_mut(c)).enumerate()
                        {
                            for ((dh, &d), &w) in dxhat.iter_mut().zip(gr).zip(gv) {
                                *dh = d * w;
                            }
                            let mean_d = dxhat.iter().copied().sum::<T>() * inv_c;
                            let mean_dh = kernels::dot(&dxhat, hr) * inv_c;
                            for ((s, &dh), &h) in sr.iter_mut().zip(&dxhat).zip(hr) {
                                *s += rstd[r] * (dh - mean_d - h * mean_dh);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if rg(*table) {
                        let d = nodes[table.0].value.cols();
                        let gt = acc(&mut grads, *table, len(*table));
                        for (row, &id) in g.chunks_exact(d).zip(ids) {
                            gt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = len(p);
                        if rg(p) {
                            acc(&mut grads, p, n).iter_mut().zip(&g[off..off + n]).for_each(|(s, &d)| *s += d);
                        }
                        off += n;
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let (lq, d) = (tq.shape()[0], tq.shape()[1]);
                    let lk = tk.shape()[0];
                    let (dq, dk, dv) = attention_backward(
                        tq.data(),
                        tk.data(),
                        tv.data(),
                        &g,
                        probs,
                        lq,
                        lk,
                        d,
                        *heads,
                    );
                    for (x, dx) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if rg(x) {
                            acc(&mut grads, x, dx.len()).iter_mut().zip(&dx).for_each(|(s, &t)| *s += t);
                        }
                    }
                }
                Op::Mix { pulse, cands, weights, residual } => {
                    let tp = &nodes[pulse.0].value;
                    let (l, d) = (tp.shape()[0], tp.shape()[1]);
                    let n = cands.len();
                    let scale = T::one() / T::of(d as f64).sqrt();
                    let mut dpulse = vec![T::zero(); l * d];
                    let mut dcands: Vec<Vec<T>> = cands
                        .iter()
                        .map(|c| if c.is_some() { vec![T::zero(); l * d] } else { Vec::new() })
                        .collect();
                    let mut dw = vec![T::zero(); n];
                    for i in 0..l {
                        let gi = &g[i * d..(i + 1) * d];
                        let w = &weights[i * n..(i + 1) * n];
                        let p = &tp.data()[i * d..(i + 1) * d];
                        for (j, c) in cands.iter().enumerate() {
                            dw[j] = match c {
                                Some(_) if j == 0 && *residual => T::zero(),
                                Some(c) => kernels::dot(gi, nodes[c.0].value.row(i)),
                                None => T::zero(),
                            };
                        }
                        let wdw = kernels::dot(w, &dw);
                        for (j, c) in cands.iter().enumerate() {
                            let Some(c) = c else { continue };
                            let ds = w[j] * (dw[j] - wdw) * scale;
                            let f = nodes[c.0].value.row(i);
                            let dc = &mut dcands[j][i * d..(i + 1) * d];
                            let dp = &mut dpulse[i * d..(i + 1) * d];
                            let wj = if j == 0 && *residual { T::zero() } else { w[j] };
                            for t in 0..d {
                                dc[t] += wj * gi[t] + ds * p[t];
                                dp[t] += ds * f[t];
                            }
                        }
                    }
                    if *residual {
                        dcands[0].iter_mut().zip(&g).for_each(|(s, &t)| *s += t);
                    }
                    if rg(*pulse) {
                        acc(&mut grads, *pulse, l * d).iter_mut().zip(&dpulse).for_each(|(s, &t)| *s += t);
                    }
                    for (c, dc) in cands.iter().zip(&dcands) {
                        if let Some(c) = c {
                            if rg(*c) {
                                acc(&mut grads, *c, l * d).iter_mut().zip(dc).for_each(|(s, &t)| *s += t);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    if rg(*logits) {
                        let v = nodes[logits.0].value.cols();
                        let scale = g[0] / T::of(targets.len() as f64);
                        let gl = acc(&mut grads, *logits, probs.len());
                        for (r, &t) in targets.iter().enumerate() {
                            let row = &mut gl[r * v..(r + 1) * v];
                            for (s, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                                *s += p * scale;
                            }
                            row[t] -= scale;
                        }
                    }
                }
                &Op::Sum(x) => {
                    if rg(x) {
                        acc(&mut grads, x, len(x)).iter_mut().for_each(|s| *s += g[0]);
                    }
                }
                &Op::Mean(x) => {
                    if rg(x) {
                        let s0 = g[0] / T::of(len(x) as f64);
                        acc(&mut grads, x, len(x)).iter_mut().for_each(|s| *s += s0);
                    }
                }
                &Op::SumSquares(x) => {
                    if rg(x) {
                        let vx = val(x);
                        let two = T::of(2.0) * g[0];
                        acc(&mut grads, x, len(x)).iter_mut().zip(vx).for_each(|(s, &z)| *s += two * z);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Forward attention on raw row-major buffers. Returns the output and the
/// per-head probabilities (`heads x lq x lk`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    mask: &AttnMask<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    if let AttnMask::Additive(m) = mask {
        if m.shape() != [lq, lk] {
            return Err(Error::Dimension { op: "attention mask", lhs: m.shape().to_vec(), rhs: vec![lq, lk] });
        }
    }
    for i in 0..lq {
        let fully_masked = match mask {
            _ if lk == 0 => true,
            AttnMask::None => false,
            AttnMask::Causal => i + lk < lq,
            AttnMask::Additive(m) => m.row(i).iter().all(|&x| x.as_f64() <= MASKED_THRESHOLD),
        };
        if fully_masked {
            return Err(Error::FullyMaskedRow { row: i });
        }
    }
    let mut probs = vec![T::zero(); heads * lq * lk];
    let mut out = vec![T::zero(); lq * d];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        let o = h * dh;
        gemm(
            lq,
            dh,
            lk,
            scale,
            View { data: &q[o..], rs: d as isize, cs: 1 },
            View { data: &k[o..], rs: 1, cs: d as isize },
            T::zero(),
            p,
            lk,
        );
        for i in 0..lq {
            let row = &mut p[i * lk..(i + 1) * lk];
            match mask {
                AttnMask::None => {}
                AttnMask::Causal => {
                    let limit = i + lk - lq;
                    for s in row.iter_mut().skip(limit + 1) {
                        *s += T::of(MASK_VALUE);
                    }
                }
                AttnMask::Additive(m) => {
                    for (s, &mv) in row.iter_mut().zip(m.row(i)) {
                        *s += mv;
                    }
                }
            }
            kernels::softmax_in_place(row);
        }
        gemm(lq, lk, dh, T::one(), View::rm(p, lk), View { data: &v[o..], rs: d as isize, cs: 1 }, T::zero(), &mut out[o..], d);
    }
    Ok((Tensor::new(vec![lq, d], out)?, probs))
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    probs: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); lq * d];
    let mut dk = vec![T::zero(); lk * d];
    let mut dv = vec![T::zero(); lk * d];
    let mut ds = vec![T::zero(); lq * lk];
    for h in 0..heads {
        let o = h * dh;
        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
        let gview = View { data: &g[o..], rs: d as isize, cs: 1 };
        gemm(lk, lq, dh, T::one(), View::tr(p, lk), gview, T::one(), &mut dv[o..], d);
        gemm(lq, dh, lk, T::one(), gview, View { data: &v[o..], rs: 1, cs: d as isize }, T::zero(), &mut ds, lk);
        for (dr, pr) in ds.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
            let rd = kernels::dot(dr, pr);
            for (x, &pv) in dr.iter_mut().zip(pr) {
                *x = pv * (*x - rd);
            }
        }
        gemm(lq, lk, dh, scale, View::rm(&ds, lk), View { data: &k[o..], rs: d as isize, cs: 1 }, T::one(), &mut dq[o..], d);
        gemm(lk, lq, dh, scale, View::tr(&ds, lk), View { data: &q[o..], rs: d as isize, cs: 1 }, T::one(), &mut dk[o..], d);
    }
    (dq, dk, dv)
}
