//! Influence-function baseline: per-timestep label-perturbation influence
//! through a damped Hessian solve.
//!
//! For each evaluation sample the system (H + damping I) v = grad_theta L(eval)
//! is solved by conjugate gradients, with H the mean training-loss Hessian
//! applied through exact Hessian-vector products. The per-timestep influence
//! then contracts v against the mixed derivative d/dy_l grad_theta L(train),
//! which for MSE is -(2/l2) times the Jacobian row, and is scaled by the
//! label delta. The sign convention matches the gain matrix: positive means
//! swapping y1 for y2 is estimated to reduce evaluation loss.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::dataio::{ImputationSet, SampleSet};
use crate::error::{Error, Result};
use crate::gain::{EstimatorKind, GainMatrix};
use crate::model::{self, ModelParams};

#[derive(Debug, Clone)]
pub struct InfluenceConfig {
    /// Ridge added to the Hessian diagonal; keeps the solve well-posed on
    /// non-convex models.
    pub damping: f64,
    pub cg_max_iters: usize,
    /// Absolute residual-norm bound for CG convergence.
    pub cg_tolerance: f64,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig { damping: 0.01, cg_max_iters: 200, cg_tolerance: 1e-8 }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.damping < 0.0 {
            return Err(Error::Invalid("damping must be nonnegative".into()));
        }
        if self.cg_tolerance <= 0.0 || self.cg_max_iters == 0 {
            return Err(Error::Invalid("cg_tolerance and cg_max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Per-solve diagnostics; non-convergence is flagged, never silent.
#[derive(Debug, Clone)]
pub struct CgDiagnostics {
    pub converged: Vec<bool>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl CgDiagnostics {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|c| *c)
    }
}

/// Conjugate gradients on a symmetric positive (semi)definite operator.
/// Returns (solution, converged, final residual norm, iterations).
pub fn cg_solve<F>(apply: F, b: &Array1<f64>, tol: f64, max_iters: usize) -> (Array1<f64>, bool, f64, usize)
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let mut x = Array1::<f64>::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs_old = r.dot(&r);
    if rs_old.sqrt() <= tol {
        return (x, true, rs_old.sqrt(), 0);
    }
    for iter in 1..=max_iters {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap.abs() < 1e-300 {
            return (x, false, rs_old.sqrt(), iter);
        }
        let alpha = rs_old / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= tol {
            return (x, true, rs_new.sqrt(), iter);
        }
        p = &r + &(p * (rs_new / rs_old));
        rs_old = rs_new;
    }
    (x, false, rs_old.sqrt(), max_iters)
}

/// (H + damping I) v with H the mean per-sample training-loss Hessian.
pub fn damped_hvp(
    p: &ModelParams,
    train_ss: &SampleSet,
    labels: &Array2<f64>,
    damping: f64,
    v: &Array1<f64>,
) -> Result<Array1<f64>> {
    let n = train_ss.n();
    let mut out = Array1::<f64>::zeros(p.param_count());
    for i in 0..n {
        let hv = model::hvp_mse(p, &train_ss.inputs[i], &labels.row(i).to_owned(), v)?;
        out += &hv;
    }
    out /= n as f64;
    out.scaled_add(damping, v);
    Ok(out)
}

/// Influence-function estimate of the per-timestep gains, with delta
/// = y1 - y2, evaluated against the whole eval split.
pub fn estimate_influence(
    p: &ModelParams,
    train_ss: &SampleSet,
    y1: &ImputationSet,
    y2: &ImputationSet,
    eval_ss: &SampleSet,
    cfg: &InfluenceConfig,
) -> Result<(GainMatrix, CgDiagnostics)> {
    cfg.validate()?;
    if y1.labels.dim() != y2.labels.dim() {
        return Err(Error::Shape("imputation pair has mismatched label shapes".into()));
    }
    let n = train_ss.n();
    let l2 = train_ss.l2;
    let labels = &y1.labels;

    // One damped solve per eval gradient; solves are independent.
    let solves: Vec<(Array1<f64>, bool, f64, usize)> = (0..eval_ss.n())
        .into_par_iter()
        .map(|k| -> Result<(Array1<f64>, bool, f64, usize)> {
            let b = model::param_grad(p, &eval_ss.inputs[k], &eval_ss.target_row(k))?;
            let apply = |v: &Array1<f64>| {
                damped_hvp(p, train_ss, labels, cfg.damping, v).expect("hvp on validated shapes")
            };
            Ok(cg_solve(apply, &b, cfg.cg_tolerance, cfg.cg_max_iters))
        })
        .collect::<Result<_>>()?;

    let mut diags = CgDiagnostics {
        converged: Vec::with_capacity(solves.len()),
        residuals: Vec::with_capacity(solves.len()),
        iterations: Vec::with_capacity(solves.len()),
    };
    let mut v_total = Array1::<f64>::zeros(p.param_count());
    for (v, ok, res, iters) in solves {
        v_total += &v;
        diags.converged.push(ok);
        diags.residuals.push(res);
        diags.iterations.push(iters);
    }

    // I(i,l) = (2/l2) [J_i v]_l * delta(i,l).
    let delta = &y1.labels - &y2.labels;
    let rows: Vec<Array1<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Array1<f64>> {
            let jac = model::output_jacobian(p, &train_ss.inputs[i], None)?;
            Ok(jac.dot(&v_total) * (2.0 / l2 as f64))
        })
        .collect::<Result<_>>()?;
    let mut values = Array2::zeros((n, l2));
    for (i, row) in rows.into_iter().enumerate() {
        values.row_mut(i).assign(&row);
    }
    values *= &delta;

    Ok((
        GainMatrix {
            values,
            eval_split: eval_ss.split_tag,
            estimator: EstimatorKind::Influence,
            pair: (y1.source_name.clone(), y2.source_name.clone()),
        },
        diags,
    ))
}

/// Indices of the `percent`% most harmful samples by aggregate gain:
/// largest gain-from-reverting first, ties broken by ascending index.
pub fn rank_discard(g: &GainMatrix, percent: f64) -> Result<Vec<usize>> {
    if !(0.0 < percent && percent < 100.0) {
        return Err(Error::Invalid(format!("percent must be in (0,100), got {percent}")));
    }
    let agg = g.per_sample_aggregate();
    if agg.is_empty() {
        return Err(Error::Data("empty gain matrix".into()));
    }
    let n = agg.len();
    let take = ((percent / 100.0) * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| {
        agg[*b]
            .partial_cmp(&agg[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(take).collect();
    selected.sort_unstable();
    Ok(selected)
}
