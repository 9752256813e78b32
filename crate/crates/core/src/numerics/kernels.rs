//! Slice-level kernels shared by the autodiff graph and the cached decoder.

use super::Real;

/// Additive surrogate for a dropped attention/mixer entry.
pub const MASK_VALUE: f64 = -1e9;

/// Entries at or below this are treated as masked when checking for empty rows.
pub(crate) const MASKED_THRESHOLD: f64 = -5e8;

/// Layout of a matrix operand for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> View<'a, T> {
    /// Row-major `rows x cols` (leading dimension `ld`).
    pub fn rm(data: &'a [T], ld: usize) -> Self {
        Self { data, rs: ld as isize, cs: 1 }
    }

    /// Transposed view of a row-major matrix with leading dimension `ld`.
    pub fn tr(data: &'a [T], ld: usize) -> Self {
        Self { data, rs: 1, cs: ld as isize }
    }
}

/// `out (m x n, leading dimension ldo) = alpha * a (m x k) * b (k x n) + beta * out`.
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    out: &mut [T],
    ldo: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut out[i * ldo..i * ldo + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
    };
    assert!(last(m, k, a.rs, a.cs) < a.data.len(), "gemm: lhs view out of bounds");
    assert!(last(k, n, b.rs, b.cs) < b.data.len(), "gemm: rhs view out of bounds");
    assert!((m - 1) * ldo + n <= out.len(), "gemm: output view out of bounds");
    // SAFETY: bounds checked above; `out` is exclusively borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            ldo as isize,
            1,
        );
    }
}

/// Row-major `x (rows x k) * w (k x n) + bias`.
pub fn linear<T: Real>(x: &[T], rows: usize, k: usize, w: &[T], n: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); rows * n];
    if let Some(b) = bias {
        for r in 0..rows {
            out[r * n..(r + 1) * n].copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    gemm(rows, k, n, T::one(), View::rm(x, k), View::rm(w, n), beta, &mut out, n);
    out
}

/// In-place numerically stabilised softmax of one slice.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalise one row; writes `xhat` and returns the reciprocal standard deviation.
pub fn normalize_row<T: Real>(x: &[T], xhat: &mut [T], eps: T) -> T {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for (h, &v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * rstd;
    }
    rstd
}

pub fn layer_norm_rows<T: Real>(x: &[T], cols: usize, gain: &[T], bias: &[T], eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        normalize_row(xr, or, eps);
        for ((o, &g), &b) in or.iter_mut().zip(gain).zip(bias) {
            *o = *o * g + b;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// One mixer position: writes candidate weights into `w` and the fused row
/// into `out`. `cands[0]` is the self-stream; `None` entries are masked.
pub fn mix_row<T: Real>(pulse: &[T], cands: &[Option<&[T]>], residual: bool, w: &mut [T], out: &mut [T]) {
    let scale = T::one() / T::of(pulse.len() as f64).sqrt();
    for (wj, c) in w.iter_mut().zip(cands) {
        *wj = match c {
            Some(c) => dot(pulse, c) * scale,
            None => T::of(MASK_VALUE),
        };
    }
    softmax_in_place(w);
    match (residual, cands[0]) {
        (true, Some(x)) => out.copy_from_slice(x),
        _ => out.iter_mut().for_each(|o| *o = T::zero()),
    }
    for (j, c) in cands.iter().enumerate().skip(usize::from(residual)) {
        if let Some(c) = c {
            let wj = w[j];
            for (o, &f) in out.iter_mut().zip(*c) {
                *o += wj * f;
            }
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Index of the maximum, ties resolved to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_with_bias() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, 0.0, 1.0];
        let y = linear(&x, 2, 2, &w, 2, Some(&[10.0, 20.0]));
        assert_eq!(y, vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }
}
