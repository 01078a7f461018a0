//! Small differentiable numeric kernel: matrices, a tape for reverse-mode
//! gradients, the layers the model is composed from, and a finite-difference
//! gradient checker.
//!
//! Layer types hold [`ParamId`]s into a [`ParamStore`]; their `forward` methods
//! record onto a [`Graph`]. The free functions here are one-shot conveniences
//! that run a layer on plain matrices.

mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod matrix;
mod param;

pub use gradcheck::{analytic_gradients, grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::{position_encoding, silu, softmax_rows};
pub use layers::{init_weight, linear, AttentionWeights, FfnWeights, RmsNormParams};
pub use matrix::Matrix;
pub use param::{Gradients, Param, ParamId, ParamStore};

use crate::error::{Error, Result};

/// `x·W + b` on plain matrices.
pub fn linear_plain(x: &Matrix, w: &Matrix, b: Option<&Matrix>) -> Result<Matrix> {
    let out = x.matmul(w)?;
    match b {
        Some(b) => out.add_row(b),
        None => Ok(out),
    }
}

/// `r / sqrt(mean(r²) + eps) ⊙ scale`, row-wise.
pub fn rms_norm(r: &Matrix, scale: &Matrix, eps: f64) -> Result<Matrix> {
    if scale.rows() != 1 || scale.cols() != r.cols() {
        return Err(Error::dim(format!(
            "rms_norm scale {:?} for width {}",
            scale.shape(),
            r.cols()
        )));
    }
    kernels::rms_normalize(r, eps).mul_row(scale)
}

/// Multi-head attention of `x` over `y` with weights from `store`.
pub fn mha(store: &ParamStore, x: &Matrix, y: &Matrix, w: &AttentionWeights) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = w.forward(&mut g, xv, yv, false)?;
    Ok(g.value(out).clone())
}

pub fn ffn(store: &ParamStore, x: &Matrix, w: &FfnWeights) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let xv = g.constant(x.clone());
    let out = w.forward(&mut g, xv)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        assert_eq!(linear_plain(&x, &Matrix::identity(2), Some(&Matrix::zeros(1, 2))).unwrap(), x);
        let z = linear_plain(&Matrix::zeros(3, 2), &Matrix::from_rows(&[[1.0], [4.0]]), Some(&Matrix::zeros(1, 1))).unwrap();
        assert_eq!(z, Matrix::zeros(3, 1));
        let y = linear_plain(
            &Matrix::from_rows(&[[1.0, 1.0]]),
            &Matrix::from_rows(&[[2.0], [3.0]]),
            Some(&Matrix::from_rows(&[[1.0]])),
        )
        .unwrap();
        assert_eq!(y, Matrix::from_rows(&[[6.0]]));
        assert!(linear_plain(&x, &Matrix::identity(3), None).is_err());
    }
}
