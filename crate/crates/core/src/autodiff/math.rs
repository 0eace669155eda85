//! Raw slice kernels shared by the tape's forward and backward rules.

use super::scalar::Scalar;

/// C[m,n] = A[m,k] @ B[k,n], ikj order so the inner loop runs over
/// contiguous rows of B and C.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = T::zero();
        for j in 0..cols {
            let e = (row[j] - max).exp();
            dst[j] = e;
            sum += e;
        }
        for v in dst.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// dX for a row-wise softmax: dx = y ⊙ (dy − Σ_j dy_j y_j) per row.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for j in 0..cols {
            dot += y_row[j] * dy_row[j];
        }
        let dst = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dst[j] = y_row[j] * (dy_row[j] - dot);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Layer norm over each row: y = gamma ⊙ (x − μ)/√(σ² + ε) + beta.
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    cols: usize,
    eps: f64,
) -> Vec<T> {
    let eps = T::from_f64(eps);
    let n = T::from_f64(cols as f64);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let inv_std = T::one() / (var + eps).sqrt();
        let dst = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            dst[j] = gamma[j] * (row[j] - mean) * inv_std + beta[j];
        }
    }
    out
}

/// Gradients for layer norm. Returns (dx, dgamma, dbeta).
pub fn layer_norm_rows_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::from_f64(eps);
    let n = T::from_f64(cols as f64);
    let mut dx = vec![T::zero(); rows * cols];
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    let mut xhat = vec![T::zero(); cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let inv_std = T::one() / (var + eps).sqrt();
        let mut mean_dyg = T::zero();
        let mut mean_dyg_xhat = T::zero();
        for j in 0..cols {
            xhat[j] = (row[j] - mean) * inv_std;
            let dyg = dy_row[j] * gamma[j];
            mean_dyg += dyg;
            mean_dyg_xhat += dyg * xhat[j];
        }
        mean_dyg = mean_dyg / n;
        mean_dyg_xhat = mean_dyg_xhat / n;
        let dst = &mut dx[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let dyg = dy_row[j] * gamma[j];
            dst[j] = (dyg - mean_dyg - xhat[j] * mean_dyg_xhat) * inv_std;
            dgamma[j] += dy_row[j] * xhat[j];
            dbeta[j] += dy_row[j];
        }
    }
    (dx, dgamma, dbeta)
}
