//! Numeric kernels shared by the tape's forward and backward passes.
//!
//! Everything here operates on flat row-major slices; shape validation is
//! the caller's job. Matrix products go through `matrixmultiply` with
//! explicit strides, so transposed operands never get materialized.

use super::Scalar;

/// `c := alpha * A * B + beta * c` with `A` logically `[m, k]` and `B`
/// logically `[k, n]`. `ta`/`tb` mark an operand as stored transposed:
/// with `ta` the buffer holds `[k, m]` row-major, with `tb` it holds
/// `[n, k]` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
    assert_eq!(c.len(), m * n, "gemm: out buffer length");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise `softmax(scale * x)` with max-subtraction for stability.
pub fn softmax_scaled_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, scale: T, out: &mut [T]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for &v in xr {
            let s = v * scale;
            if s > max {
                max = s;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v * scale - max).exp();
            *o = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

/// Row-wise `log_softmax(x)`.
pub fn log_softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for &v in xr {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in xr {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// tanh-form GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

/// Derivative of the tanh-form GELU.
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

/// LayerNorm over each row; writes `(mean, inv_std)` pairs into `stats`
/// (`2 * rows` entries) for the backward pass.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    rows: usize,
    cols: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    stats: &mut [T],
) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(gamma.len(), cols);
    debug_assert_eq!(beta.len(), cols);
    debug_assert_eq!(stats.len(), 2 * rows);
    let inv_n = T::one() / T::from_f64(cols as f64);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = T::one() / (var + eps).sqrt();
        stats[2 * r] = mean;
        stats[2 * r + 1] = inv_std;
        for j in 0..cols {
            or[j] = (xr[j] - mean) * inv_std * gamma[j] + beta[j];
        }
    }
}

/// LayerNorm backward. Accumulates into `dx`, `dgamma`, `dbeta` (any may be
/// empty to skip that input).
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    rows: usize,
    cols: usize,
    gamma: &[T],
    stats: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let inv_n = T::one() / T::from_f64(cols as f64);
    for r in 0..rows {
        let base = r * cols;
        let mean = stats[2 * r];
        let inv_std = stats[2 * r + 1];
        if !dgamma.is_empty() || !dbeta.is_empty() {
            for j in 0..cols {
                let xhat = (x[base + j] - mean) * inv_std;
                if !dgamma.is_empty() {
                    dgamma[j] += g[base + j] * xhat;
                }
                if !dbeta.is_empty() {
                    dbeta[j] += g[base + j];
                }
            }
        }
        if !dx.is_empty() {
            let mut sum_dh = T::zero();
            let mut sum_dh_xhat = T::zero();
            for j in 0..cols {
                let xhat = (x[base + j] - mean) * inv_std;
                let dh = g[base + j] * gamma[j];
                sum_dh += dh;
                sum_dh_xhat += dh * xhat;
            }
            for j in 0..cols {
                let xhat = (x[base + j] - mean) * inv_std;
                let dh = g[base + j] * gamma[j];
                dx[base + j] += inv_std * (dh - inv_n * sum_dh - xhat * inv_n * sum_dh_xhat);
            }
        }
    }
}

/// Scaled dot-product attention forward for one head:
/// `out = softmax(q k^T / sqrt(dh)) v`. `probs` receives `[tq, tk]`.
#[allow(clippy::too_many_arguments)]
pub fn sdpa_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    tq: usize,
    tk: usize,
    dh: usize,
    dv: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut scores = vec![T::zero(); tq * tk];
    gemm(false, true, tq, dh, tk, T::one(), q, k, T::zero(), &mut scores);
    softmax_scaled_rows(&scores, tq, tk, scale, probs);
    gemm(false, false, tq, tk, dv, T::one(), probs, v, T::zero(), out);
}

/// Scaled dot-product attention backward for one head. Accumulates into
/// `dq`, `dk`, `dv` (each may be empty to skip).
#[allow(clippy::too_many_arguments)]
pub fn sdpa_backward<T: Scalar>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    tq: usize,
    tk: usize,
    dh: usize,
    dv: usize,
    dq: &mut [T],
    dk: &mut [T],
    dvv: &mut [T],
) {
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    if !dvv.is_empty() {
        gemm(true, false, tk, tq, dv, T::one(), probs, g, T::one(), dvv);
    }
    if dq.is_empty() && dk.is_empty() {
        return;
    }
    // dp = g v^T, then ds = p * (dp - rowsum(dp * p)).
    let mut ds = vec![T::zero(); tq * tk];
    gemm(false, true, tq, dv, tk, T::one(), g, v, T::zero(), &mut ds);
    for r in 0..tq {
        let row = &mut ds[r * tk..(r + 1) * tk];
        let prow = &probs[r * tk..(r + 1) * tk];
        let mut dot = T::zero();
        for (dp, &p) in row.iter().zip(prow) {
            dot += *dp * p;
        }
        for (dp, &p) in row.iter_mut().zip(prow) {
            *dp = p * (*dp - dot);
        }
    }
    if !dq.is_empty() {
        gemm(false, false, tq, tk, dh, scale, &ds, k, T::one(), dq);
    }
    if !dk.is_empty() {
        gemm(true, false, tk, tq, dh, scale, &ds, q, T::one(), dk);
    }
}

/// Row-wise L2 normalization; writes per-row `1 / max(norm, eps_guard)` into
/// `inv_norms`. Rows with norm below the guard map to zeros (inv stored as 0).
pub fn l2_normalize_rows<T: Scalar>(
    x: &[T],
    rows: usize,
    cols: usize,
    out: &mut [T],
    inv_norms: &mut [T],
) {
    let guard = T::from_f64(1e-12);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let mut sq = T::zero();
        for &v in xr {
            sq += v * v;
        }
        let norm = sq.sqrt();
        let inv = if norm > guard { T::one() / norm } else { T::zero() };
        inv_norms[r] = inv;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        // 2x3 * 3x2, hand-checked.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_views_agree() {
        // A stored transposed and B stored transposed must reproduce A*B.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // [3,2] holding A^T
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3,2]
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0]; // [2,3] holding B^T
        let mut c0 = [0.0f64; 4];
        let mut c1 = [0.0f64; 4];
        let mut c2 = [0.0f64; 4];
        gemm(false, false, 2, 3, 2, 1.0, &a, &b, 0.0, &mut c0);
        gemm(true, false, 2, 3, 2, 1.0, &at, &b, 0.0, &mut c1);
        gemm(false, true, 2, 3, 2, 1.0, &a, &bt, 0.0, &mut c2);
        assert_eq!(c0, c1);
        assert_eq!(c0, c2);
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [1.0f64, 0.0, 0.0, 1.0];
        let b = [2.0f64, 0.0, 0.0, 2.0];
        let mut c = [1.0f64, 1.0, 1.0, 1.0];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c, [3.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn log_softmax_shift_invariant() {
        let x = [1.0f64, 2.0, 3.0];
        let shifted = [101.0f64, 102.0, 103.0];
        let mut a = [0.0f64; 3];
        let mut b = [0.0f64; 3];
        log_softmax_rows(&x, 1, 3, &mut a);
        log_softmax_rows(&shifted, 1, 3, &mut b);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
        let total: f64 = a.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_unit_rows() {
        // Constant row normalizes to beta; [0,2] has mean 1, var 1.
        let x = [5.0f64, 5.0, 0.0, 2.0];
        let gamma = [2.0f64, 2.0];
        let beta = [1.0f64, -1.0];
        let mut out = [0.0f64; 4];
        let mut stats = [0.0f64; 4];
        layer_norm_rows(&x, 2, 2, &gamma, &beta, 1e-12, &mut out, &mut stats);
        assert!((out[0] - 1.0).abs() < 1e-5);
        assert!((out[1] + 1.0).abs() < 1e-5);
        assert!((out[2] - (1.0 * -1.0 * 2.0 + 1.0)).abs() < 1e-5);
        assert!((out[3] - (1.0 * 2.0 - 1.0)).abs() < 1e-5);
    }

    #[test]
    fn gelu_reference_points() {
        // gelu(0) = 0; large inputs pass through; negative tail vanishes.
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0f64).abs() < 1e-6);
        // Finite-difference check on the analytic derivative.
        let h = 1e-6;
        for &x in &[-2.5f64, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn sdpa_single_key_is_identity() {
        // One key/value: attention weight must be exactly 1.
        let q = [0.3f64, -0.1];
        let k = [0.9f64, 0.2];
        let v = [5.0f64, -7.0, 2.0];
        let mut probs = [0.0f64; 1];
        let mut out = [0.0f64; 3];
        sdpa_forward(&q, &k, &v, 1, 1, 2, 3, &mut probs, &mut out);
        assert_eq!(probs[0], 1.0);
        assert_eq!(out, v);
    }

    #[test]
    fn sdpa_equal_scores_uniform() {
        let q = [0.0f64, 0.0];
        let k = [1.0f64, 2.0, 3.0, 4.0];
        let v = [1.0f64, 3.0];
        let mut probs = [0.0f64; 2];
        let mut out = [0.0f64; 1];
        sdpa_forward(&q, &k, &v, 1, 2, 2, 1, &mut probs, &mut out);
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((out[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_guards_zero_rows() {
        let x = [3.0f64, 4.0, 0.0, 0.0];
        let mut out = [0.0f64; 4];
        let mut inv = [0.0f64; 2];
        l2_normalize_rows(&x, 2, 2, &mut out, &mut inv);
        assert!((out[0] - 0.6).abs() < 1e-12);
        assert!((out[1] - 0.8).abs() < 1e-12);
        assert_eq!(&out[2..], &[0.0, 0.0]);
        assert_eq!(inv[1], 0.0);
    }
}
