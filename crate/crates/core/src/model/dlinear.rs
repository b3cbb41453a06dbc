//! Moving-average decomposition forecaster.
//!
//! Each input channel is split into a trend (moving average with edge
//! replication) and a remainder; one shared linear map per component predicts
//! the horizon, and the per-channel predictions are summed. For multivariate
//! input an output-projection layer maps the stacked channel forecasts down
//! to the target horizon.
//!
//! Layout of theta: [W_trend (l2 x l1), b_trend (l2), W_rem (l2 x l1),
//! b_rem (l2), then optionally W_proj (l2 x d*l2), b_proj (l2)].

use super::kernels::{matvec, matvec_t, outer_acc};
use super::Dims;

pub fn param_count(dims: &Dims, output_projection: bool) -> usize {
    let base = 2 * (dims.l2 * dims.l1 + dims.l2);
    if output_projection {
        base + dims.l2 * (dims.d * dims.l2) + dims.l2
    } else {
        base
    }
}

/// Moving average with edge replication; kernel must be odd.
pub fn moving_average(x: &[f64], kernel: usize) -> Vec<f64> {
    let n = x.len();
    let half = kernel / 2;
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for u in 0..kernel {
            let idx = (j + u).saturating_sub(half).min(n - 1);
            acc += x[idx];
        }
        *o = acc / kernel as f64;
    }
    out
}

pub struct Cache {
    /// Per-channel trend series (length l1 each).
    pub trends: Vec<Vec<f64>>,
    /// Per-channel remainder series.
    pub remainders: Vec<Vec<f64>>,
    /// Stacked per-channel forecasts (d * l2), before projection.
    pub stacked: Vec<f64>,
}

struct Offsets {
    wt: usize,
    bt: usize,
    wr: usize,
    br: usize,
    wo: usize,
    bo: usize,
}

fn offsets(dims: &Dims) -> Offsets {
    let wt = 0;
    let bt = wt + dims.l2 * dims.l1;
    let wr = bt + dims.l2;
    let br = wr + dims.l2 * dims.l1;
    let wo = br + dims.l2;
    let bo = wo + dims.l2 * dims.d * dims.l2;
    Offsets { wt, bt, wr, br, wo, bo }
}

/// x is the input window, d rows of length l1, row-major.
pub fn forward(theta: &[f64], dims: &Dims, kernel: usize, output_projection: bool, x: &[f64]) -> (Vec<f64>, Cache) {
    let (d, l1, l2) = (dims.d, dims.l1, dims.l2);
    let o = offsets(dims);
    let mut trends = Vec::with_capacity(d);
    let mut remainders = Vec::with_capacity(d);
    let mut stacked = vec![0.0; d * l2];
    for ch in 0..d {
        let row = &x[ch * l1..(ch + 1) * l1];
        let t = moving_average(row, kernel);
        let r: Vec<f64> = row.iter().zip(t.iter()).map(|(a, b)| a - b).collect();
        let out = &mut stacked[ch * l2..(ch + 1) * l2];
        let mut tmp = vec![0.0; l2];
        matvec(&theta[o.wt..o.bt], l2, l1, &t, &mut tmp);
        out.copy_from_slice(&tmp);
        matvec(&theta[o.wr..o.br], l2, l1, &r, &mut tmp);
        for ((s, v), (bt, br)) in out
            .iter_mut()
            .zip(tmp.iter())
            .zip(theta[o.bt..o.wr].iter().zip(theta[o.br..o.wo].iter()))
        {
            *s += v + bt + br;
        }
        trends.push(t);
        remainders.push(r);
    }
    let f = if output_projection {
        let mut f = vec![0.0; l2];
        matvec(&theta[o.wo..o.bo], l2, d * l2, &stacked, &mut f);
        for (fj, bj) in f.iter_mut().zip(theta[o.bo..o.bo + l2].iter()) {
            *fj += *bj;
        }
        f
    } else {
        stacked.clone()
    };
    (f, Cache { trends, remainders, stacked })
}

/// grad += d(seed . f)/d(theta).
pub fn vjp_acc(
    theta: &[f64],
    dims: &Dims,
    output_projection: bool,
    cache: &Cache,
    seed: &[f64],
    grad: &mut [f64],
) {
    let (d, l1, l2) = (dims.d, dims.l1, dims.l2);
    let o = offsets(dims);
    let delta_stacked: Vec<f64> = if output_projection {
        outer_acc(&mut grad[o.wo..o.bo], l2, d * l2, seed, &cache.stacked);
        for (g, s) in grad[o.bo..o.bo + l2].iter_mut().zip(seed.iter()) {
            *g += *s;
        }
        let mut delta = vec![0.0; d * l2];
        matvec_t(&theta[o.wo..o.bo], l2, d * l2, seed, &mut delta);
        delta
    } else {
        seed.to_vec()
    };
    for ch in 0..d {
        let dc = &delta_stacked[ch * l2..(ch + 1) * l2];
        outer_acc(&mut grad[o.wt..o.bt], l2, l1, dc, &cache.trends[ch]);
        outer_acc(&mut grad[o.wr..o.br], l2, l1, dc, &cache.remainders[ch]);
        for (g, v) in grad[o.bt..o.wr].iter_mut().zip(dc.iter()) {
            *g += *v;
        }
        for (g, v) in grad[o.br..o.wo].iter_mut().zip(dc.iter()) {
            *g += *v;
        }
    }
}

/// Exact Hessian-vector product of the MSE loss for one sample.
///
/// f is quadratic in theta when the projection layer is present (W_proj
/// multiplies the channel maps), so the R-backward keeps the cross terms.
pub fn hvp_mse(
    theta: &[f64],
    dims: &Dims,
    kernel: usize,
    output_projection: bool,
    x: &[f64],
    y: &[f64],
    v: &[f64],
    out: &mut [f64],
) {
    let (d, l1, l2) = (dims.d, dims.l1, dims.l2);
    let o = offsets(dims);
    let (f, cache) = forward(theta, dims, kernel, output_projection, x);

    // Tangent of the stacked channel outputs along v (trend/remainder fixed).
    let mut r_stacked = vec![0.0; d * l2];
    for ch in 0..d {
        let rs = &mut r_stacked[ch * l2..(ch + 1) * l2];
        let mut tmp = vec![0.0; l2];
        matvec(&v[o.wt..o.bt], l2, l1, &cache.trends[ch], &mut tmp);
        rs.copy_from_slice(&tmp);
        matvec(&v[o.wr..o.br], l2, l1, &cache.remainders[ch], &mut tmp);
        for ((s, t), (vbt, vbr)) in rs
            .iter_mut()
            .zip(tmp.iter())
            .zip(v[o.bt..o.wr].iter().zip(v[o.br..o.wo].iter()))
        {
            *s += t + vbt + vbr;
        }
    }
    let rf: Vec<f64> = if output_projection {
        let mut rf = vec![0.0; l2];
        matvec(&v[o.wo..o.bo], l2, d * l2, &cache.stacked, &mut rf);
        let mut tmp = vec![0.0; l2];
        matvec(&theta[o.wo..o.bo], l2, d * l2, &r_stacked, &mut tmp);
        for ((r, t), vb) in rf.iter_mut().zip(tmp.iter()).zip(v[o.bo..o.bo + l2].iter()) {
            *r += t + vb;
        }
        rf
    } else {
        r_stacked.clone()
    };

    let l2f = l2 as f64;
    let g: Vec<f64> = f.iter().zip(y.iter()).map(|(fj, yj)| 2.0 / l2f * (fj - yj)).collect();
    let rg: Vec<f64> = rf.iter().map(|r| 2.0 / l2f * r).collect();

    // Trend/remainder inputs are fixed functions of x, so only R{delta}
    // reaches the channel maps.
    let r_delta_stacked: Vec<f64> = if output_projection {
        // R{dW_proj} = R{g} stacked^T + g R{stacked}^T ; R{db_proj} = R{g}.
        outer_acc(&mut out[o.wo..o.bo], l2, d * l2, &rg, &cache.stacked);
        outer_acc(&mut out[o.wo..o.bo], l2, d * l2, &g, &r_stacked);
        for (go, r) in out[o.bo..o.bo + l2].iter_mut().zip(rg.iter()) {
            *go += *r;
        }
        let mut r_delta = vec![0.0; d * l2];
        matvec_t(&v[o.wo..o.bo], l2, d * l2, &g, &mut r_delta);
        let mut tmp = vec![0.0; d * l2];
        matvec_t(&theta[o.wo..o.bo], l2, d * l2, &rg, &mut tmp);
        for (r, t) in r_delta.iter_mut().zip(tmp.iter()) {
            *r += *t;
        }
        r_delta
    } else {
        rg
    };

    for ch in 0..d {
        let rdc = &r_delta_stacked[ch * l2..(ch + 1) * l2];
        outer_acc(&mut out[o.wt..o.bt], l2, l1, rdc, &cache.trends[ch]);
        outer_acc(&mut out[o.wr..o.br], l2, l1, rdc, &cache.remainders[ch]);
        for (gv, r) in out[o.bt..o.wr].iter_mut().zip(rdc.iter()) {
            *gv += *r;
        }
        for (gv, r) in out[o.br..o.wo].iter_mut().zip(rdc.iter()) {
            *gv += *r;
        }
    }
}
