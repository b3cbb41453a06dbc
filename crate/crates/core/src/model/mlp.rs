//! Fully-connected ReLU network on the flattened input window.
//!
//! `layers` counts linear maps: in -> hidden -> ... -> hidden -> out, with
//! ReLU between consecutive maps and none after the last. At exactly-zero
//! pre-activations the subgradient 0 is used.

use super::kernels::{matvec, matvec_t, outer_acc};
use super::Dims;

/// (rows, cols) of each linear map, in theta layout order.
pub fn layer_shapes(dims: &Dims, layers: usize, hidden: usize) -> Vec<(usize, usize)> {
    let input = dims.input_len();
    let mut shapes = Vec::with_capacity(layers);
    if layers == 1 {
        shapes.push((dims.l2, input));
        return shapes;
    }
    shapes.push((hidden, input));
    for _ in 0..layers - 2 {
        shapes.push((hidden, hidden));
    }
    shapes.push((dims.l2, hidden));
    shapes
}

pub fn param_count(dims: &Dims, layers: usize, hidden: usize) -> usize {
    layer_shapes(dims, layers, hidden)
        .iter()
        .map(|(r, c)| r * c + r)
        .sum()
}

pub struct Cache {
    /// Input to each linear map: activations[0] is the flattened x.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers (layers 0..layers-1).
    pub preacts: Vec<Vec<f64>>,
}

pub fn forward(theta: &[f64], dims: &Dims, layers: usize, hidden: usize, x: &[f64]) -> (Vec<f64>, Cache) {
    let shapes = layer_shapes(dims, layers, hidden);
    let mut activations = Vec::with_capacity(layers);
    let mut preacts = Vec::with_capacity(layers.saturating_sub(1));
    let mut a = x.to_vec();
    let mut off = 0;
    for (li, (rows, cols)) in shapes.iter().enumerate() {
        activations.push(a.clone());
        let mut z = vec![0.0; *rows];
        matvec(&theta[off..off + rows * cols], *rows, *cols, &a, &mut z);
        let bias = &theta[off + rows * cols..off + rows * cols + rows];
        for (zj, bj) in z.iter_mut().zip(bias.iter()) {
            *zj += *bj;
        }
        off += rows * cols + rows;
        if li + 1 < layers {
            preacts.push(z.clone());
            for v in z.iter_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        a = z;
    }
    (a, Cache { activations, preacts })
}

/// grad += d(seed . f)/d(theta), reusing the forward cache.
pub fn vjp_acc(
    theta: &[f64],
    dims: &Dims,
    layers: usize,
    hidden: usize,
    cache: &Cache,
    seed: &[f64],
    grad: &mut [f64],
) {
    let shapes = layer_shapes(dims, layers, hidden);
    // Offsets of each layer inside theta.
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for (rows, cols) in &shapes {
        offsets.push(off);
        off += rows * cols + rows;
    }

    let mut delta = seed.to_vec();
    for li in (0..layers).rev() {
        let (rows, cols) = shapes[li];
        let o = offsets[li];
        let a = &cache.activations[li];
        outer_acc(&mut grad[o..o + rows * cols], rows, cols, &delta, a);
        for (g, d) in grad[o + rows * cols..o + rows * cols + rows].iter_mut().zip(delta.iter()) {
            *g += *d;
        }
        if li > 0 {
            let mut prev = vec![0.0; cols];
            matvec_t(&theta[o..o + rows * cols], rows, cols, &delta, &mut prev);
            for (p, z) in prev.iter_mut().zip(cache.preacts[li - 1].iter()) {
                if *z <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

/// Exact Hessian-vector product of the MSE loss for one sample.
///
/// Pearlmutter's trick: forward-tangent along v, backward, then the
/// R-derivative of the backward pass. ReLU contributes only its a.e.-zero
/// second derivative through the fixed activation masks.
pub fn hvp_mse(
    theta: &[f64],
    dims: &Dims,
    layers: usize,
    hidden: usize,
    x: &[f64],
    y: &[f64],
    v: &[f64],
    out: &mut [f64],
) {
    let shapes = layer_shapes(dims, layers, hidden);
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for (rows, cols) in &shapes {
        offsets.push(off);
        off += rows * cols + rows;
    }

    let (f, cache) = forward(theta, dims, layers, hidden, x);

    // Tangent pass: r_act[li] = R{input of layer li}, rf = R{f}.
    let mut r_act: Vec<Vec<f64>> = Vec::with_capacity(layers);
    let mut ra = vec![0.0; x.len()];
    for li in 0..layers {
        r_act.push(ra.clone());
        let (rows, cols) = shapes[li];
        let o = offsets[li];
        let a = &cache.activations[li];
        let mut rz = vec![0.0; rows];
        matvec(&v[o..o + rows * cols], rows, cols, a, &mut rz);
        let mut wra = vec![0.0; rows];
        matvec(&theta[o..o + rows * cols], rows, cols, &ra, &mut wra);
        for ((r, w), vb) in rz.iter_mut().zip(wra.iter()).zip(v[o + rows * cols..o + rows * cols + rows].iter()) {
            *r += *w + *vb;
        }
        if li + 1 < layers {
            for (r, z) in rz.iter_mut().zip(cache.preacts[li].iter()) {
                if *z <= 0.0 {
                    *r = 0.0;
                }
            }
        }
        ra = rz;
    }
    let rf = ra;

    let l2 = dims.l2 as f64;
    let g: Vec<f64> = f.iter().zip(y.iter()).map(|(fj, yj)| 2.0 / l2 * (fj - yj)).collect();
    let rg: Vec<f64> = rf.iter().map(|r| 2.0 / l2 * r).collect();

    // R-backward: track (delta, r_delta) together.
    let mut delta = g;
    let mut r_delta = rg;
    for li in (0..layers).rev() {
        let (rows, cols) = shapes[li];
        let o = offsets[li];
        let a = &cache.activations[li];
        let ra = &r_act[li];
        // R{dW} = R{delta} a^T + delta R{a}^T ; R{db} = R{delta}.
        outer_acc(&mut out[o..o + rows * cols], rows, cols, &r_delta, a);
        outer_acc(&mut out[o..o + rows * cols], rows, cols, &delta, ra);
        for (g, d) in out[o + rows * cols..o + rows * cols + rows].iter_mut().zip(r_delta.iter()) {
            *g += *d;
        }
        if li > 0 {
            // delta_prev = (W^T delta) o mask ; R{..} = (V^T delta + W^T R{delta}) o mask.
            let mut prev = vec![0.0; cols];
            matvec_t(&theta[o..o + rows * cols], rows, cols, &delta, &mut prev);
            let mut r_prev = vec![0.0; cols];
            matvec_t(&v[o..o + rows * cols], rows, cols, &delta, &mut r_prev);
            let mut tmp = vec![0.0; cols];
            matvec_t(&theta[o..o + rows * cols], rows, cols, &r_delta, &mut tmp);
            for (r, t) in r_prev.iter_mut().zip(tmp.iter()) {
                *r += *t;
            }
            for ((p, r), z) in prev.iter_mut().zip(r_prev.iter_mut()).zip(cache.preacts[li - 1].iter()) {
                if *z <= 0.0 {
                    *p = 0.0;
                    *r = 0.0;
                }
            }
            delta = prev;
            r_delta = r_prev;
        }
    }
}
