//! Affine and ReLU building blocks with hand-derived backward passes.
//!
//! Weights are stored `[d_in, d_out]` so a batch `x: n×d_in` maps to
//! `x·W + b: n×d_out`.

use super::matrix::{gemm_nn, gemm_nt, gemm_tn, Matrix};
use super::params::Tensor;
use crate::error::{shape_err, Result};

fn check_affine(x: &Matrix, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let [d_in, d_out] = w.shape() else {
        return Err(shape_err!("affine weight must be rank 2, got {:?}", w.shape()));
    };
    if x.cols() != *d_in {
        return Err(shape_err!("affine input has {} columns, weight expects {d_in}", x.cols()));
    }
    if b.shape() != [*d_out] {
        return Err(shape_err!("affine bias shape {:?}, expected [{d_out}]", b.shape()));
    }
    Ok((*d_in, *d_out))
}

pub fn affine_forward(x: &Matrix, w: &Tensor, b: &Tensor) -> Result<Matrix> {
    let (d_in, d_out) = check_affine(x, w, b)?;
    let n = x.rows();
    let mut out = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm_nn(x.data(), w.data(), n, d_in, d_out, &mut out);
    Matrix::new(n, d_out, out)
}

/// Gradients of an affine map given the upstream gradient `dz`.
pub struct AffineGrads {
    pub dx: Option<Matrix>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

/// `need_dx = false` skips the input gradient (first layer of a network).
pub fn affine_backward(x: &Matrix, w: &Tensor, dz: &Matrix, need_dx: bool) -> Result<AffineGrads> {
    let [d_in, d_out] = w.shape() else {
        return Err(shape_err!("affine weight must be rank 2"));
    };
    let (d_in, d_out) = (*d_in, *d_out);
    if dz.cols() != d_out || dz.rows() != x.rows() || x.cols() != d_in {
        return Err(shape_err!(
            "affine backward: x {}x{}, dz {}x{}, w {d_in}x{d_out}",
            x.rows(),
            x.cols(),
            dz.rows(),
            dz.cols()
        ));
    }
    let n = x.rows();
    let mut dw = vec![0.0; d_in * d_out];
    gemm_tn(x.data(), dz.data(), n, d_in, d_out, &mut dw);
    let mut db = vec![0.0; d_out];
    for i in 0..n {
        for (acc, g) in db.iter_mut().zip(dz.row(i)) {
            *acc += g;
        }
    }
    let dx = if need_dx {
        let mut dx = vec![0.0; n * d_in];
        gemm_nt(dz.data(), w.data(), n, d_out, d_in, &mut dx);
        Some(Matrix::new(n, d_in, dx)?)
    } else {
        None
    };
    Ok(AffineGrads { dx, dw, db })
}

pub fn relu_inplace(z: &mut Matrix) {
    for v in z.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the ReLU output `activated` is not positive.
pub fn relu_backward_inplace(activated: &Matrix, grad: &mut Matrix) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
