//! Small forecasting models with exact hand-derived gradients.
//!
//! Everything the estimators need lives here: forward passes, MSE loss with
//! its output gradient, parameter gradients, per-output Jacobians (optionally
//! compressed through a [`SegmentProjector`]), the induced tangent kernel
//! between two inputs, and exact Hessian-vector products for the influence
//! baseline. All arithmetic is f64; gradients are validated against central
//! finite differences in the tests.

mod dlinear;
mod kernels;
mod linear;
mod mlp;

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use kernels::dot;

/// Problem dimensions shared by all architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Number of input features.
    pub d: usize,
    /// Input window length.
    pub l1: usize,
    /// Forecast horizon.
    pub l2: usize,
}

impl Dims {
    pub fn new(d: usize, l1: usize, l2: usize) -> Self {
        Dims { d, l1, l2 }
    }

    pub fn input_len(&self) -> usize {
        self.d * self.l1
    }
}

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    /// f = W x, no bias.
    Linear,
    /// ReLU network; `layers` linear maps, shared `hidden` width.
    Mlp { layers: usize, hidden: usize },
    /// Trend/remainder decomposition with shared per-component linear maps.
    DLinear { kernel: usize, output_projection: bool },
}

impl Arch {
    /// Default 3-layer MLP with hidden width 128.
    pub fn default_mlp() -> Self {
        Arch::Mlp { layers: 3, hidden: 128 }
    }

    /// Default DLinear: decomposition kernel 25; projection layer added for
    /// multivariate input.
    pub fn default_dlinear(d: usize) -> Self {
        Arch::DLinear { kernel: 25, output_projection: d > 1 }
    }

    pub fn param_count(&self, dims: &Dims) -> usize {
        match self {
            Arch::Linear => linear::param_count(dims),
            Arch::Mlp { layers, hidden } => mlp::param_count(dims, *layers, *hidden),
            Arch::DLinear { output_projection, .. } => dlinear::param_count(dims, *output_projection),
        }
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if dims.d < 1 || dims.l1 < 1 || dims.l2 < 1 {
            return Err(Error::Invalid(format!(
                "dims must be positive, got d={} l1={} l2={}",
                dims.d, dims.l1, dims.l2
            )));
        }
        match self {
            Arch::Linear => Ok(()),
            Arch::Mlp { layers, hidden } => {
                if *layers < 1 {
                    return Err(Error::Invalid("mlp needs at least one layer".into()));
                }
                if *layers >= 2 && *hidden == 0 {
                    return Err(Error::Invalid("mlp hidden width must be positive".into()));
                }
                Ok(())
            }
            Arch::DLinear { kernel, output_projection } => {
                if *kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::Invalid(format!(
                        "dlinear kernel must be odd and positive, got {kernel}"
                    )));
                }
                if dims.d > 1 && !output_projection {
                    return Err(Error::Invalid(
                        "dlinear with multivariate input requires the output projection".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Arch::Linear => "linear".into(),
            Arch::Mlp { layers, hidden } => format!("mlp(layers={layers},hidden={hidden})"),
            Arch::DLinear { kernel, output_projection } => {
                format!("dlinear(kernel={kernel},projection={output_projection})")
            }
        }
    }
}

/// Flat parameter vector plus its architecture.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub theta: Array1<f64>,
    pub arch: Arch,
    pub dims: Dims,
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn from_theta(theta: Array1<f64>, arch: Arch, dims: Dims) -> Result<Self> {
        arch.validate(&dims)?;
        let expect = arch.param_count(&dims);
        if theta.len() != expect {
            return Err(Error::Shape(format!(
                "theta length {} does not match {} which needs {expect}",
                theta.len(),
                arch.name()
            )));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("theta contains non-finite entries".into()));
        }
        Ok(ModelParams { theta, arch, dims })
    }
}

/// MSE loss value with the gradient w.r.t. the model output.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    /// (2/l2) (f - y).
    pub grad_output: Array1<f64>,
}

/// Loss functions understood by the estimation path.
///
/// Only MSE is derived; the mixed second derivative d2L/df_j dy_l that feeds
/// the gain estimators is dispatched per variant so unsupported losses fail
/// loudly rather than silently reusing the MSE constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
}

impl Loss {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mse" => Ok(Loss::Mse),
            other => Err(Error::Invalid(format!(
                "loss '{other}' is not supported; the estimation path is derived for 'mse' only"
            ))),
        }
    }

    /// d2L/df_j dy_l, which for MSE is -(2/l2) when j == l and 0 otherwise.
    pub fn mixed_second(&self, l2: usize) -> f64 {
        match self {
            Loss::Mse => -2.0 / l2 as f64,
        }
    }
}

/// Block-averaging output compressor: A maps l2 outputs to r segment means,
/// a_dag is its pseudo-inverse.
#[derive(Debug, Clone)]
pub struct SegmentProjector {
    pub r: usize,
    pub block_lengths: Vec<usize>,
    /// r x l2 averaging map; row s holds 1/len_s over block s.
    pub a: Array2<f64>,
    /// l2 x r pseudo-inverse; 0/1 block indicator.
    pub a_dag: Array2<f64>,
}

impl SegmentProjector {
    pub fn l2(&self) -> usize {
        self.a.ncols()
    }

    /// True when the projector is the identity (segments == l2).
    pub fn is_identity(&self) -> bool {
        self.r == self.l2()
    }

    /// Half-open output ranges of each block.
    pub fn block_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.r);
        let mut start = 0;
        for len in &self.block_lengths {
            out.push(start..start + len);
            start += len;
        }
        out
    }

    /// proj = a_dag . (a . v): projection of v onto block-constant vectors.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for range in self.block_ranges() {
            let len = range.len() as f64;
            let mean = v[range.clone()].iter().sum::<f64>() / len;
            for o in &mut out[range] {
                *o = mean;
            }
        }
        out
    }

    /// out = a_dag . q, expanding r segment values to l2 outputs.
    pub fn expand(&self, q: &[f64]) -> Vec<f64> {
        debug_assert_eq!(q.len(), self.r);
        let mut out = vec![0.0; self.l2()];
        for (range, qs) in self.block_ranges().into_iter().zip(q.iter()) {
            for o in &mut out[range] {
                *o = *qs;
            }
        }
        out
    }
}

/// Build the block projector: blocks 1..r-1 of length floor(l2/r), final
/// block takes the remainder.
pub fn make_projector(l2: usize, segments: usize) -> Result<SegmentProjector> {
    if segments == 0 || segments > l2 {
        return Err(Error::Invalid(format!(
            "segments must be in 1..={l2}, got {segments}"
        )));
    }
    let base = l2 / segments;
    let mut block_lengths = vec![base; segments];
    block_lengths[segments - 1] = l2 - (segments - 1) * base;
    let mut a = Array2::zeros((segments, l2));
    let mut a_dag = Array2::zeros((l2, segments));
    let mut start = 0;
    for (s, len) in block_lengths.iter().enumerate() {
        for j in start..start + len {
            a[[s, j]] = 1.0 / *len as f64;
            a_dag[[j, s]] = 1.0;
        }
        start += len;
    }
    Ok(SegmentProjector { r: segments, block_lengths, a, a_dag })
}

/// Deterministic init: weights uniform in +-1/sqrt(fan_in), biases zero.
pub fn init_params(arch: &Arch, dims: &Dims, seed: u64) -> Result<ModelParams> {
    arch.validate(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = arch.param_count(dims);
    let mut theta = vec![0.0; p];
    let mut fill = |theta: &mut [f64], rows: usize, cols: usize, off: usize, with_bias: bool| {
        let bound = 1.0 / (cols as f64).sqrt();
        for w in theta[off..off + rows * cols].iter_mut() {
            *w = rng.random_range(-bound..bound);
        }
        // Biases stay zero.
        let _ = with_bias;
    };
    match arch {
        Arch::Linear => fill(&mut theta, dims.l2, dims.input_len(), 0, false),
        Arch::Mlp { layers, hidden } => {
            let mut off = 0;
            for (rows, cols) in mlp::layer_shapes(dims, *layers, *hidden) {
                fill(&mut theta, rows, cols, off, true);
                off += rows * cols + rows;
            }
        }
        Arch::DLinear { output_projection, .. } => {
            let (l1, l2) = (dims.l1, dims.l2);
            fill(&mut theta, l2, l1, 0, true);
            fill(&mut theta, l2, l1, l2 * l1 + l2, true);
            if *output_projection {
                fill(&mut theta, l2, dims.d * l2, 2 * (l2 * l1 + l2), true);
            }
        }
    }
    ModelParams::from_theta(Array1::from_vec(theta), arch.clone(), *dims)
}

fn check_input_shape(p: &ModelParams, x: &Array2<f64>) -> Result<()> {
    if x.nrows() != p.dims.d || x.ncols() != p.dims.l1 {
        return Err(Error::Shape(format!(
            "input shape ({}, {}) does not match dims ({}, {})",
            x.nrows(),
            x.ncols(),
            p.dims.d,
            p.dims.l1
        )));
    }
    Ok(())
}

fn flat_input(x: &Array2<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

/// Forward pass; returns the length-l2 forecast.
pub fn forward(p: &ModelParams, x: &Array2<f64>) -> Result<Array1<f64>> {
    check_input_shape(p, x)?;
    let xf = flat_input(x);
    let theta = p.theta.as_slice().expect("theta contiguous");
    let out = match &p.arch {
        Arch::Linear => linear::forward(theta, &p.dims, &xf),
        Arch::Mlp { layers, hidden } => mlp::forward(theta, &p.dims, *layers, *hidden, &xf).0,
        Arch::DLinear { kernel, output_projection } => {
            dlinear::forward(theta, &p.dims, *kernel, *output_projection, &xf).0
        }
    };
    Ok(Array1::from_vec(out))
}

/// MSE with mean-over-horizon reduction.
pub fn loss(f_out: &Array1<f64>, y: &Array1<f64>) -> Result<LossValue> {
    if f_out.len() != y.len() {
        return Err(Error::Shape(format!(
            "output length {} vs target length {}",
            f_out.len(),
            y.len()
        )));
    }
    let l2 = f_out.len() as f64;
    let mut value = 0.0;
    let mut grad = Array1::zeros(f_out.len());
    for (j, (fj, yj)) in f_out.iter().zip(y.iter()).enumerate() {
        let r = fj - yj;
        value += r * r;
        grad[j] = 2.0 / l2 * r;
    }
    Ok(LossValue { value: value / l2, grad_output: grad })
}

/// Gradient of (seed . f(x, theta)) w.r.t. theta.
pub fn output_grad(p: &ModelParams, x: &Array2<f64>, seed: &Array1<f64>) -> Result<Array1<f64>> {
    check_input_shape(p, x)?;
    if seed.len() != p.dims.l2 {
        return Err(Error::Shape("seed length must equal l2".into()));
    }
    let xf = flat_input(x);
    let theta = p.theta.as_slice().expect("theta contiguous");
    let seed = seed.as_slice().expect("seed contiguous");
    let mut grad = vec![0.0; p.param_count()];
    match &p.arch {
        Arch::Linear => linear::vjp_acc(&p.dims, &xf, seed, &mut grad),
        Arch::Mlp { layers, hidden } => {
            let (_, cache) = mlp::forward(theta, &p.dims, *layers, *hidden, &xf);
            mlp::vjp_acc(theta, &p.dims, *layers, *hidden, &cache, seed, &mut grad);
        }
        Arch::DLinear { kernel, output_projection } => {
            let (_, cache) = dlinear::forward(theta, &p.dims, *kernel, *output_projection, &xf);
            dlinear::vjp_acc(theta, &p.dims, *output_projection, &cache, seed, &mut grad);
        }
    }
    Ok(Array1::from_vec(grad))
}

/// Exact reverse-mode gradient of the MSE loss w.r.t. theta.
pub fn param_grad(p: &ModelParams, x: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>> {
    let f = forward(p, x)?;
    let lv = loss(&f, y)?;
    output_grad(p, x, &lv.grad_output)
}

/// Rows of the (projected) Jacobian df/dtheta.
///
/// With a projector, row s is the gradient of the s-th segment-averaged
/// output; with `None` the full l2 x P Jacobian is returned.
pub fn output_jacobian(p: &ModelParams, x: &Array2<f64>, proj: Option<&SegmentProjector>) -> Result<Array2<f64>> {
    check_input_shape(p, x)?;
    if let Some(pr) = proj {
        if pr.l2() != p.dims.l2 {
            return Err(Error::Shape(format!(
                "projector is over {} outputs but model has l2={}",
                pr.l2(),
                p.dims.l2
            )));
        }
    }
    let rows = proj.map_or(p.dims.l2, |pr| pr.r);
    let mut jac = Array2::zeros((rows, p.param_count()));
    let mut seed = Array1::zeros(p.dims.l2);
    for s in 0..rows {
        match proj {
            None => seed[s] = 1.0,
            Some(pr) => {
                for (j, v) in pr.a.row(s).iter().enumerate() {
                    seed[j] = *v;
                }
            }
        }
        let g = output_grad(p, x, &seed)?;
        jac.row_mut(s).assign(&g);
        seed.fill(0.0);
    }
    Ok(jac)
}

/// Tangent-kernel block between two inputs: J_a . J_b^T (r x r).
pub fn ntk(p: &ModelParams, x_a: &Array2<f64>, x_b: &Array2<f64>, proj: Option<&SegmentProjector>) -> Result<Array2<f64>> {
    let ja = output_jacobian(p, x_a, proj)?;
    let jb = output_jacobian(p, x_b, proj)?;
    Ok(ja.dot(&jb.t()))
}

/// Exact Hessian-vector product of the per-sample MSE loss.
pub fn hvp_mse(p: &ModelParams, x: &Array2<f64>, y: &Array1<f64>, v: &Array1<f64>) -> Result<Array1<f64>> {
    check_input_shape(p, x)?;
    if v.len() != p.param_count() {
        return Err(Error::Shape("hvp direction length must equal P".into()));
    }
    let xf = flat_input(x);
    let theta = p.theta.as_slice().expect("theta contiguous");
    let vs = v.as_slice().expect("v contiguous");
    let ys = y.as_slice().expect("y contiguous");
    let mut out = vec![0.0; p.param_count()];
    match &p.arch {
        Arch::Linear => linear::hvp_mse(&p.dims, &xf, vs, &mut out),
        Arch::Mlp { layers, hidden } => {
            mlp::hvp_mse(theta, &p.dims, *layers, *hidden, &xf, ys, vs, &mut out)
        }
        Arch::DLinear { kernel, output_projection } => {
            dlinear::hvp_mse(theta, &p.dims, *kernel, *output_projection, &xf, ys, vs, &mut out)
        }
    }
    Ok(Array1::from_vec(out))
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

// --- checkpoint files ------------------------------------------------------

fn arch_header(arch: &Arch) -> String {
    match arch {
        Arch::Linear => "arch=linear".into(),
        Arch::Mlp { layers, hidden } => format!("arch=mlp layers={layers} hidden={hidden}"),
        Arch::DLinear { kernel, output_projection } => {
            format!("arch=dlinear kernel={kernel} projection={}", u8::from(*output_projection))
        }
    }
}

fn parse_arch_header(line: &str) -> Result<Arch> {
    let mut fields = std::collections::HashMap::new();
    for tok in line.trim_start_matches('#').split_whitespace() {
        if let Some((k, v)) = tok.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .ok_or_else(|| Error::Data(format!("checkpoint header missing '{k}'")))?
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint header field '{k}' not an integer")))
    };
    match fields.get("arch").map(String::as_str) {
        Some("linear") => Ok(Arch::Linear),
        Some("mlp") => Ok(Arch::Mlp { layers: get("layers")?, hidden: get("hidden")? }),
        Some("dlinear") => Ok(Arch::DLinear {
            kernel: get("kernel")?,
            output_projection: get("projection")? != 0,
        }),
        other => Err(Error::Data(format!("unknown arch in checkpoint header: {other:?}"))),
    }
}

/// Write theta with an arch/dims header. Values use shortest-roundtrip
/// decimal, so reading the file back is bit-exact.
pub fn save_checkpoint(path: &Path, p: &ModelParams) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(w, "# {}", arch_header(&p.arch)).map_err(io)?;
    writeln!(w, "# dims d={} l1={} l2={}", p.dims.d, p.dims.l1, p.dims.l2).map_err(io)?;
    writeln!(w, "# theta_len={}", p.theta.len()).map_err(io)?;
    for v in p.theta.iter() {
        writeln!(w, "{v}").map_err(io)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut arch = None;
    let mut dims = None;
    let mut values = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if rest.starts_with("arch=") {
                arch = Some(parse_arch_header(rest)?);
            } else if let Some(d) = rest.strip_prefix("dims ") {
                let mut vals = [0usize; 3];
                for tok in d.split_whitespace() {
                    if let Some((k, v)) = tok.split_once('=') {
                        let idx = match k {
                            "d" => 0,
                            "l1" => 1,
                            "l2" => 2,
                            _ => continue,
                        };
                        vals[idx] = v
                            .parse()
                            .map_err(|_| Error::Data(format!("bad dims field '{tok}'")))?;
                    }
                }
                dims = Some(Dims::new(vals[0], vals[1], vals[2]));
            }
            continue;
        }
        let v: f64 = trimmed
            .parse()
            .map_err(|_| Error::Data(format!("bad theta value at line {}", ln + 1)))?;
        values.push(v);
    }
    let arch = arch.ok_or_else(|| Error::Data("checkpoint missing arch header".into()))?;
    let dims = dims.ok_or_else(|| Error::Data("checkpoint missing dims header".into()))?;
    ModelParams::from_theta(Array1::from_vec(values), arch, dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs()).max(1e-8);
        (a - b).abs() / denom
    }

    fn random_input(dims: &Dims, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((dims.d, dims.l1), |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(dims.l2, |_| rng.random_range(-1.0..1.0));
        (x, y)
    }

    /// Central finite difference of the loss w.r.t. theta coordinate idx.
    fn fd_loss_grad(p: &ModelParams, x: &Array2<f64>, y: &Array1<f64>, idx: usize, h: f64) -> f64 {
        let mut plus = p.clone();
        plus.theta[idx] += h;
        let mut minus = p.clone();
        minus.theta[idx] -= h;
        let lp = loss(&forward(&plus, x).unwrap(), y).unwrap().value;
        let lm = loss(&forward(&minus, x).unwrap(), y).unwrap().value;
        (lp - lm) / (2.0 * h)
    }

    /// Central finite difference of the segment-mean output s w.r.t. theta idx.
    fn fd_segment_grad(
        p: &ModelParams,
        x: &Array2<f64>,
        proj: &SegmentProjector,
        s: usize,
        idx: usize,
        h: f64,
    ) -> f64 {
        let seg_mean = |p: &ModelParams| {
            let f = forward(p, x).unwrap();
            let range = proj.block_ranges()[s].clone();
            f.slice(ndarray::s![range.clone()]).sum() / range.len() as f64
        };
        let mut plus = p.clone();
        plus.theta[idx] += h;
        let mut minus = p.clone();
        minus.theta[idx] -= h;
        (seg_mean(&plus) - seg_mean(&minus)) / (2.0 * h)
    }

    #[test]
    fn mlp_param_count_formula() {
        // 24*128+128 + 128*128+128 + 128*24+24 = 22,808 (enumerated by hand).
        let dims = Dims::new(1, 24, 24);
        let arch = Arch::Mlp { layers: 3, hidden: 128 };
        assert_eq!(arch.param_count(&dims), 22_808);
        let p = init_params(&arch, &dims, 0).unwrap();
        assert_eq!(p.theta.len(), 22_808);
    }

    #[test]
    fn init_is_deterministic_and_rejects_zero_hidden() {
        let dims = Dims::new(2, 8, 4);
        let arch = Arch::Mlp { layers: 3, hidden: 16 };
        let a = init_params(&arch, &dims, 42).unwrap();
        let b = init_params(&arch, &dims, 42).unwrap();
        assert_eq!(a.theta, b.theta);
        let c = init_params(&arch, &dims, 43).unwrap();
        assert_ne!(a.theta, c.theta);

        let bad = Arch::Mlp { layers: 3, hidden: 0 };
        assert!(init_params(&bad, &dims, 0).is_err());
    }

    #[test]
    fn loss_examples() {
        // f == y.
        let z = loss(&array![1.0, 2.0], &array![1.0, 2.0]).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.grad_output.iter().all(|v| *v == 0.0));
        // f=[1,2], y=[0,0]: value (1+4)/2 = 2.5, grad (2/2)(f-y) = [1,2].
        let lv = loss(&array![1.0, 2.0], &array![0.0, 0.0]).unwrap();
        assert_eq!(lv.value, 2.5);
        assert_eq!(lv.grad_output, array![1.0, 2.0]);
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        // d(value)/d f_j equals grad_output within 1e-8 by central difference.
        let f = array![0.3, -1.2, 0.7];
        let y = array![0.1, 0.4, -0.2];
        let lv = loss(&f, &y).unwrap();
        let h = 1e-6;
        for j in 0..f.len() {
            let mut fp = f.clone();
            fp[j] += h;
            let mut fm = f.clone();
            fm[j] -= h;
            let fd = (loss(&fp, &y).unwrap().value - loss(&fm, &y).unwrap().value) / (2.0 * h);
            assert!((fd - lv.grad_output[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn forward_all_zero_weights_gives_bias_output() {
        let dims = Dims::new(1, 6, 3);
        let arch = Arch::Mlp { layers: 2, hidden: 4 };
        let theta = Array1::zeros(arch.param_count(&dims));
        let p = ModelParams::from_theta(theta, arch, dims).unwrap();
        let (x, _) = random_input(&dims, 1);
        let f = forward(&p, &x).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_hidden_unit_mlp_by_hand() {
        // layers=3, hidden=1, d=1, l1=1, l2=1.
        // z1 = 2x + 0.5 ; a1 = relu(z1) ; z2 = -a1 + 1 ; a2 = relu(z2)
        // f = 3 a2 + 0.25.
        let dims = Dims::new(1, 1, 1);
        let arch = Arch::Mlp { layers: 3, hidden: 1 };
        let theta = array![2.0, 0.5, -1.0, 1.0, 3.0, 0.25];
        let p = ModelParams::from_theta(theta, arch, dims).unwrap();
        // x = 1: z1 = 2.5, z2 = -1.5 -> a2 = 0 -> f = 0.25.
        let f = forward(&p, &array![[1.0]]).unwrap();
        assert_eq!(f[0], 0.25);
        // x = -0.1: z1 = 0.3, z2 = 0.7 -> f = 3*0.7 + 0.25 = 2.35.
        let f = forward(&p, &array![[-0.1]]).unwrap();
        assert!((f[0] - 2.35).abs() < 1e-12);
    }

    #[test]
    fn dlinear_averaging_weights_on_constant_series() {
        // Constant series c: trend = c, remainder = 0. With W_trend rows
        // all 1/l1 and zero elsewhere, output = c everywhere.
        let dims = Dims::new(1, 8, 4);
        let arch = Arch::DLinear { kernel: 3, output_projection: false };
        let mut theta = Array1::zeros(arch.param_count(&dims));
        for j in 0..dims.l2 {
            for i in 0..dims.l1 {
                theta[j * dims.l1 + i] = 1.0 / dims.l1 as f64;
            }
        }
        let p = ModelParams::from_theta(theta, arch, dims).unwrap();
        let x = Array2::from_elem((1, 8), 3.25);
        let f = forward(&p, &x).unwrap();
        for v in f.iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_param_grad_closed_form() {
        // f = theta . x (l2 = 1): dL/dtheta = 2 (theta.x - y) x / l2.
        let dims = Dims::new(1, 3, 1);
        let p = ModelParams::from_theta(array![0.5, -1.0, 2.0], Arch::Linear, dims).unwrap();
        let x = array![[1.0, 2.0, -0.5]];
        let y = array![1.0];
        let fx = 0.5 * 1.0 + -1.0 * 2.0 + 2.0 * -0.5;
        let g = param_grad(&p, &x, &y).unwrap();
        for (i, xi) in [1.0, 2.0, -0.5].iter().enumerate() {
            assert!((g[i] - 2.0 * (fx - 1.0) * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn param_grad_zero_residual_is_zero() {
        let dims = Dims::new(1, 4, 2);
        let arch = Arch::Mlp { layers: 2, hidden: 3 };
        let p = init_params(&arch, &dims, 9).unwrap();
        let (x, _) = random_input(&dims, 2);
        let y = forward(&p, &x).unwrap();
        let g = param_grad(&p, &x, &y).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn param_grad_matches_finite_differences() {
        let cases: Vec<(Arch, Dims)> = vec![
            (Arch::Mlp { layers: 3, hidden: 8 }, Dims::new(1, 6, 4)),
            (Arch::Mlp { layers: 2, hidden: 5 }, Dims::new(2, 5, 3)),
            (Arch::DLinear { kernel: 3, output_projection: false }, Dims::new(1, 7, 4)),
            (Arch::DLinear { kernel: 5, output_projection: true }, Dims::new(2, 7, 3)),
            (Arch::Linear, Dims::new(2, 4, 3)),
        ];
        for (case, (arch, dims)) in cases.into_iter().enumerate() {
            let p = init_params(&arch, &dims, 100 + case as u64).unwrap();
            let (x, y) = random_input(&dims, 200 + case as u64);
            let g = param_grad(&p, &x, &y).unwrap();
            for idx in 0..p.param_count() {
                let fd = fd_loss_grad(&p, &x, &y, idx, 1e-5);
                assert!(
                    rel_err(g[idx], fd) < 1e-5,
                    "{} idx {idx}: analytic {} fd {}",
                    arch.name(),
                    g[idx],
                    fd
                );
            }
        }
    }

    #[test]
    fn output_jacobian_matches_finite_differences() {
        let arch = Arch::Mlp { layers: 3, hidden: 6 };
        let dims = Dims::new(1, 5, 4);
        let p = init_params(&arch, &dims, 7).unwrap();
        let (x, _) = random_input(&dims, 8);
        for segments in [1, 2, 4] {
            let proj = make_projector(dims.l2, segments).unwrap();
            let jac = output_jacobian(&p, &x, Some(&proj)).unwrap();
            for s in 0..segments {
                for idx in 0..p.param_count() {
                    let fd = fd_segment_grad(&p, &x, &proj, s, idx, 1e-5);
                    assert!(
                        rel_err(jac[[s, idx]], fd) < 1e-5,
                        "seg {s} idx {idx}: {} vs {}",
                        jac[[s, idx]],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn full_projector_equals_identity_jacobian() {
        let arch = Arch::Mlp { layers: 2, hidden: 5 };
        let dims = Dims::new(1, 4, 3);
        let p = init_params(&arch, &dims, 3).unwrap();
        let (x, _) = random_input(&dims, 4);
        let full = output_jacobian(&p, &x, None).unwrap();
        let proj = make_projector(dims.l2, dims.l2).unwrap();
        let seg = output_jacobian(&p, &x, Some(&proj)).unwrap();
        assert_eq!(full, seg);
    }

    #[test]
    fn linear_jacobian_rows_are_segment_averaged_inputs() {
        // For f = W x, df_l/dW[j,i] = x_i when j == l; a segment row averages
        // the input copies over its block.
        let dims = Dims::new(1, 3, 4);
        let arch = Arch::Linear;
        let p = init_params(&arch, &dims, 5).unwrap();
        let x = array![[0.5, -1.5, 2.0]];
        let proj = make_projector(4, 2).unwrap();
        let jac = output_jacobian(&p, &x, Some(&proj)).unwrap();
        // Block 0 covers outputs {0,1}: gradient w.r.t. W row 0 is x/2.
        for i in 0..3 {
            assert!((jac[[0, i]] - x[[0, i]] / 2.0).abs() < 1e-12);
            assert!((jac[[0, 3 + i]] - x[[0, i]] / 2.0).abs() < 1e-12);
            assert!(jac[[0, 6 + i]] == 0.0 && jac[[0, 9 + i]] == 0.0);
        }
    }

    #[test]
    fn ntk_is_symmetric_psd_and_linear_reduces_to_dot() {
        let arch = Arch::Mlp { layers: 3, hidden: 8 };
        let dims = Dims::new(1, 6, 4);
        let p = init_params(&arch, &dims, 11).unwrap();
        let (x, _) = random_input(&dims, 12);
        let k = ntk(&p, &x, &x, None).unwrap();
        // Symmetric.
        for i in 0..4 {
            for j in 0..4 {
                assert!((k[[i, j]] - k[[j, i]]).abs() < 1e-12);
            }
        }
        // PSD: v^T K v >= -1e-10 for a few probes.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let v = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0_f64));
            let q = v.dot(&k.dot(&v));
            assert!(q >= -1e-10, "quadratic form {q}");
        }

        // Linear model: ntk(x_a, x_b) = (x_a . x_b) I.
        let pl = init_params(&Arch::Linear, &Dims::new(1, 3, 2), 1).unwrap();
        let xa = array![[1.0, 2.0, 3.0]];
        let xb = array![[-1.0, 0.5, 2.0]];
        let k = ntk(&pl, &xa, &xb, None).unwrap();
        let d = 1.0 * -1.0 + 2.0 * 0.5 + 3.0 * 2.0;
        assert!((k[[0, 0]] - d).abs() < 1e-12 && (k[[1, 1]] - d).abs() < 1e-12);
        assert!(k[[0, 1]] == 0.0 && k[[1, 0]] == 0.0);
    }

    #[test]
    fn ntk_orthogonal_inputs_is_zero() {
        let pl = init_params(&Arch::Linear, &Dims::new(1, 4, 3), 1).unwrap();
        let xa = array![[1.0, 0.0, 1.0, 0.0]];
        let xb = array![[0.0, 1.0, 0.0, -1.0]];
        let k = ntk(&pl, &xa, &xb, None).unwrap();
        assert!(k.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projector_block_lengths_and_identities() {
        // l2=5, segments=2: floor(5/2)=2, final block 5-2 = 3.
        let proj = make_projector(5, 2).unwrap();
        assert_eq!(proj.block_lengths, vec![2, 3]);

        // segments = l2 gives the identity map.
        let id = make_projector(4, 4).unwrap();
        assert_eq!(id.a, Array2::eye(4));
        assert_eq!(id.a_dag, Array2::eye(4));

        // A . A_dag = I and (A_dag A)^2 = A_dag A within 1e-12.
        for (l2, r) in [(7, 3), (24, 4), (5, 2)] {
            let pr = make_projector(l2, r).unwrap();
            let aad = pr.a.dot(&pr.a_dag);
            for i in 0..r {
                for j in 0..r {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((aad[[i, j]] - expect).abs() < 1e-12);
                }
            }
            let pi = pr.a_dag.dot(&pr.a);
            let pi2 = pi.dot(&pi);
            for (a, b) in pi.iter().zip(pi2.iter()) {
                assert!((a - b).abs() < 1e-12);
                // Symmetry comes with block-constant structure.
            }
            for i in 0..l2 {
                for j in 0..l2 {
                    assert!((pi[[i, j]] - pi[[j, i]]).abs() < 1e-15);
                }
            }
        }

        assert!(make_projector(4, 0).is_err());
        assert!(make_projector(4, 5).is_err());
    }

    #[test]
    fn hvp_matches_finite_difference_of_gradients() {
        let cases: Vec<(Arch, Dims)> = vec![
            (Arch::Mlp { layers: 3, hidden: 6 }, Dims::new(1, 5, 3)),
            (Arch::DLinear { kernel: 3, output_projection: true }, Dims::new(2, 6, 3)),
            (Arch::Linear, Dims::new(1, 4, 2)),
        ];
        for (case, (arch, dims)) in cases.into_iter().enumerate() {
            let p = init_params(&arch, &dims, 31 + case as u64).unwrap();
            let (x, y) = random_input(&dims, 41 + case as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(51 + case as u64);
            let v = Array1::from_shape_fn(p.param_count(), |_| rng.random_range(-1.0..1.0));
            let hv = hvp_mse(&p, &x, &y, &v).unwrap();

            let h = 1e-6;
            let mut plus = p.clone();
            plus.theta = &p.theta + &(&v * h);
            let mut minus = p.clone();
            minus.theta = &p.theta - &(&v * h);
            let gp = param_grad(&plus, &x, &y).unwrap();
            let gm = param_grad(&minus, &x, &y).unwrap();
            let fd = (&gp - &gm) / (2.0 * h);
            for idx in 0..p.param_count() {
                assert!(
                    rel_err(hv[idx], fd[idx]) < 1e-4,
                    "{} idx {idx}: hvp {} fd {}",
                    arch.name(),
                    hv[idx],
                    fd[idx]
                );
            }
        }
    }

    #[test]
    fn loss_dispatch_rejects_unknown_losses() {
        assert!(Loss::parse("mse").is_ok());
        assert!(Loss::parse("mae").is_err());
        // The symbolic mixed second derivative for MSE.
        assert_eq!(Loss::Mse.mixed_second(24), -2.0 / 24.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dims = Dims::new(2, 5, 3);
        let arch = Arch::DLinear { kernel: 3, output_projection: true };
        let p = init_params(&arch, &dims, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p.arch, q.arch);
        assert_eq!(p.dims, q.dims);
        assert_eq!(p.theta, q.theta);
        // Bytes are stable across rewrites too.
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &q).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let dims = Dims::new(1, 4, 2);
        let p = init_params(&Arch::Linear, &dims, 0).unwrap();
        let bad = Array2::zeros((2, 4));
        assert!(forward(&p, &bad).is_err());
    }
}
