//! Numeric kernels shared by forward and backward passes.
//!
//! Every reduction accumulates left to right over its contraction index so
//! results are bit-reproducible across runs. Matmul uses an i-k-j loop: for
//! each output element the k terms are still added in ascending order, while
//! the innermost j loop stays vectorizable.

use alloc::vec;
use alloc::vec::Vec;

use super::Real;

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul<R: Real>(a: &[R], m: usize, k: usize, b: &[R], n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                o_row[j] = o_row[j] + a_ip * b_row[j];
            }
        }
    }
    out
}

/// B[c,r] = A[r,c]ᵀ
pub fn transpose<R: Real>(a: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction. `causal` restricts row `i` of a
/// square matrix to columns `0..=i`; masked entries are exactly zero.
pub fn row_softmax<R: Real>(x: &[R], rows: usize, cols: usize, causal: bool) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for i in 0..rows {
        let width = if causal { i + 1 } else { cols };
        let row = &x[i * cols..i * cols + width];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let o_row = &mut out[i * cols..i * cols + width];
        let mut sum = R::zero();
        for (o, &v) in o_row.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in o_row.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Row-wise log-softmax with max subtraction.
pub fn row_log_softmax<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = R::zero();
        for &v in row {
            sum = sum + (v - max).exp();
        }
        let log_z = max + sum.ln();
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row.iter()) {
            *o = v - log_z;
        }
    }
    out
}

/// Activation kinds supported by the FFN layers.
pub fn act_forward<R: Real>(kind: super::ActKind, x: R) -> R {
    use super::ActKind::*;
    match kind {
        Relu => {
            if x > R::zero() {
                x
            } else {
                R::zero()
            }
        }
        Silu => x * sigmoid(x),
        Gelu => {
            // tanh approximation of GELU
            let c = R::from_f64_lossy(0.797_884_560_802_865_4); // sqrt(2/pi)
            let k = R::from_f64_lossy(0.044_715);
            let half = R::from_f64_lossy(0.5);
            half * x * (R::one() + (c * (x + k * x * x * x)).tanh())
        }
    }
}

/// d act(x) / dx
pub fn act_backward<R: Real>(kind: super::ActKind, x: R) -> R {
    use super::ActKind::*;
    match kind {
        Relu => {
            if x > R::zero() {
                R::one()
            } else {
                R::zero()
            }
        }
        Silu => {
            let s = sigmoid(x);
            s + x * s * (R::one() - s)
        }
        Gelu => {
            let c = R::from_f64_lossy(0.797_884_560_802_865_4);
            let k = R::from_f64_lossy(0.044_715);
            let half = R::from_f64_lossy(0.5);
            let three = R::from_f64_lossy(3.0);
            let u = c * (x + k * x * x * x);
            let t = u.tanh();
            let du = c * (R::one() + three * k * x * x);
            half * (R::one() + t) + half * x * (R::one() - t * t) * du
        }
    }
}

pub fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

/// y[i,:] = gain ⊙ x[i,:] / rms(x[i,:]), rms = sqrt(mean(x²) + eps)
pub fn rmsnorm_forward<R: Real>(x: &[R], rows: usize, cols: usize, gain: &[R], eps: R) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    let n = R::from_usize(cols).unwrap();
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mut ms = R::zero();
        for &v in row {
            ms = ms + v * v;
        }
        let inv = R::one() / (ms / n + eps).sqrt();
        for (j, (o, &v)) in out[i * cols..(i + 1) * cols].iter_mut().zip(row.iter()).enumerate() {
            *o = gain[j] * v * inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ActKind;

    #[test]
    fn matmul_identity() {
        let eye = [1.0f64, 0.0, 0.0, 1.0];
        let a = [3.0, -1.0, 2.5, 7.0];
        assert_eq!(matmul(&eye, 2, 2, &a, 2), a.to_vec());
    }

    #[test]
    fn softmax_symmetry() {
        let p = row_softmax(&[0.0f64, 0.0], 1, 2, false);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn causal_softmax_masks_upper_triangle() {
        let p = row_softmax(&[1.0f64, 9.0, 2.0, 2.0], 2, 2, true);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 0.5).abs() < 1e-12 && (p[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn silu_at_zero_is_zero() {
        assert_eq!(act_forward(ActKind::Silu, 0.0f64), 0.0);
        assert_eq!(act_forward(ActKind::Relu, 0.0f64), 0.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(transpose(&t, 3, 2), a);
    }
}
