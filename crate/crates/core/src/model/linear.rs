//! Bias-free linear forecaster f = W x on the flattened window.
//!
//! Kept deliberately minimal: it is the model whose gains, influence and
//! oracle values have closed forms, so it anchors most hand-derived oracles.

use super::kernels::{matvec, outer_acc};
use super::Dims;

pub fn param_count(dims: &Dims) -> usize {
    dims.l2 * dims.input_len()
}

pub fn forward(theta: &[f64], dims: &Dims, x: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; dims.l2];
    matvec(theta, dims.l2, dims.input_len(), x, &mut f);
    f
}

pub fn vjp_acc(dims: &Dims, x: &[f64], seed: &[f64], grad: &mut [f64]) {
    outer_acc(grad, dims.l2, dims.input_len(), seed, x);
}

/// Gauss-Newton is exact here: H v = (2/l2) J^T J v with J rows x^T.
pub fn hvp_mse(dims: &Dims, x: &[f64], v: &[f64], out: &mut [f64]) {
    let l2f = dims.l2 as f64;
    let mut rf = vec![0.0; dims.l2];
    matvec(v, dims.l2, dims.input_len(), x, &mut rf);
    let rg: Vec<f64> = rf.iter().map(|r| 2.0 / l2f * r).collect();
    outer_acc(out, dims.l2, dims.input_len(), &rg, x);
}
