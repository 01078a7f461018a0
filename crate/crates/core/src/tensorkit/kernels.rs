//! Forward kernels on plain matrices. The tape in [`super::graph`] reuses these
//! for its forward values.

use crate::tensorkit::Matrix;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax, max-shifted. With `causal`, entry (i, j) for j > i is masked out.
pub fn softmax_rows_masked(x: &Matrix, causal: bool) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let limit = if causal { (r + 1).min(row.len()) } else { row.len() };
        let max = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in &mut row[..limit] {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in &mut row[..limit] {
            *v /= total;
        }
        for v in &mut row[limit..] {
            *v = 0.0;
        }
    }
    out
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    softmax_rows_masked(x, false)
}

/// Per-row log-softmax via log-sum-exp.
pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn silu(x: &Matrix) -> Matrix {
    x.map(|v| v * sigmoid(v))
}

/// `r / sqrt(mean(r²) + eps)` per row, before the learnable scale.
pub fn rms_normalize(r: &Matrix, eps: f64) -> Matrix {
    let mut out = r.clone();
    let d = r.cols() as f64;
    for i in 0..r.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d + eps;
        if ms == 0.0 {
            continue;
        }
        let inv = 1.0 / ms.sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Fixed sinusoidal table: even column 2k holds sin(t / 10000^(2k/D)), the odd column after it cos of the same angle.
pub fn position_encoding(n: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(n, width);
    for t in 0..n {
        for c in 0..width {
            let k2 = (c - c % 2) as f64;
            let angle = t as f64 / 10000f64.powf(k2 / width as f64);
            out.set(t, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}
