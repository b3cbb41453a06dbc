//! Brute-force ground truth by actual retraining.
//!
//! The true gain of swapping sample i's labels from y1 to y2 is the
//! difference of summed evaluation losses between the baseline model and a
//! model retrained with only that swap, both runs sharing the same
//! initialization and shuffle stream so the label effect is isolated.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use crate::dataio::{ImputationSet, SampleSet};
use crate::error::{Error, Result};
use crate::model::{self, Arch, ModelParams};
use crate::train::{train, TrainConfig};

/// Ground-truth gains from a retraining sweep.
#[derive(Debug, Clone)]
pub struct OracleResult {
    /// Training-sample indices that were swapped, in sweep order.
    pub indices: Vec<usize>,
    /// Eval-loss-sum difference per swept index (positive = swap helped).
    pub true_gains: Vec<f64>,
    /// Mean evaluation MSE of the baseline model.
    pub base_loss: f64,
    /// Mean evaluation MSE of each retrained model.
    pub per_run_losses: Vec<f64>,
    /// Wall seconds for the sweep and per retrain.
    pub wall_seconds: f64,
    pub seconds_per_retrain: f64,
}

impl OracleResult {
    /// Projected wall time for a sweep over `full_n` retrains, from the
    /// measured per-retrain cost.
    pub fn projected_seconds(&self, full_n: usize) -> f64 {
        self.seconds_per_retrain * full_n as f64
    }
}

fn eval_loss_sum(p: &ModelParams, eval_ss: &SampleSet) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..eval_ss.n() {
        let f = model::forward(p, &eval_ss.inputs[k])?;
        total += model::loss(&f, &eval_ss.target_row(k))?.value;
    }
    Ok(total)
}

fn swapped_labels(y1: &ImputationSet, y2: &ImputationSet, index: usize, timestep: Option<usize>) -> Array2<f64> {
    let mut labels = y1.labels.clone();
    match timestep {
        None => labels.row_mut(index).assign(&y2.labels.row(index)),
        Some(l) => labels[[index, l]] = y2.labels[[index, l]],
    }
    labels
}

/// Retrain with sample `index`'s labels swapped to y2 and return the
/// decrease in summed evaluation loss. `timestep` narrows the swap to a
/// single horizon position (much slower to sweep; off by default).
#[allow(clippy::too_many_arguments)]
pub fn true_gain(
    index: usize,
    y1: &ImputationSet,
    y2: &ImputationSet,
    train_ss: &SampleSet,
    val_ss: &SampleSet,
    eval_ss: &SampleSet,
    arch: &Arch,
    cfg: &TrainConfig,
    timestep: Option<usize>,
) -> Result<f64> {
    if index >= train_ss.n() {
        return Err(Error::Invalid(format!("sample index {index} out of range")));
    }
    let val_labels = val_ss.targets.clone();
    let (base, _) = train(arch, train_ss, &y1.labels, val_ss, &val_labels, cfg)?;
    let base_sum = eval_loss_sum(&base, eval_ss)?;
    let swapped = swapped_labels(y1, y2, index, timestep);
    let (retrained, _) = train(arch, train_ss, &swapped, val_ss, &val_labels, cfg)?;
    let run_sum = eval_loss_sum(&retrained, eval_ss)?;
    Ok(base_sum - run_sum)
}

/// Sweep a set of sample indices, one retrain each, and collect the true
/// gains. Retrains are independent and run in parallel; the baseline run is
/// shared. Progress is reported through `log`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_sweep(
    indices: &[usize],
    y1: &ImputationSet,
    y2: &ImputationSet,
    train_ss: &SampleSet,
    val_ss: &SampleSet,
    eval_ss: &SampleSet,
    arch: &Arch,
    cfg: &TrainConfig,
    timestep: Option<usize>,
) -> Result<OracleResult> {
    if let Some(bad) = indices.iter().find(|i| **i >= train_ss.n()) {
        return Err(Error::Invalid(format!("sample index {bad} out of range")));
    }
    let started = Instant::now();
    let val_labels = val_ss.targets.clone();
    let (base, _) = train(arch, train_ss, &y1.labels, val_ss, &val_labels, cfg)?;
    let base_sum = eval_loss_sum(&base, eval_ss)?;
    let m = eval_ss.n() as f64;

    let done = std::sync::atomic::AtomicUsize::new(0);
    let runs: Vec<(f64, f64)> = indices
        .par_iter()
        .map(|&i| -> Result<(f64, f64)> {
            let swapped = swapped_labels(y1, y2, i, timestep);
            let (retrained, _) = train(arch, train_ss, &swapped, val_ss, &val_labels, cfg)?;
            let run_sum = eval_loss_sum(&retrained, eval_ss)?;
            let finished = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if finished % 20 == 0 || finished == indices.len() {
                log::info!("oracle sweep: {finished}/{} retrains", indices.len());
            }
            Ok((base_sum - run_sum, run_sum / m))
        })
        .collect::<Result<_>>()?;

    let wall_seconds = started.elapsed().as_secs_f64();
    let retrains = indices.len().max(1) as f64;
    let result = OracleResult {
        indices: indices.to_vec(),
        true_gains: runs.iter().map(|(g, _)| *g).collect(),
        base_loss: base_sum / m,
        per_run_losses: runs.iter().map(|(_, l)| *l).collect(),
        wall_seconds,
        seconds_per_retrain: wall_seconds / retrains,
    };
    log::info!(
        "oracle sweep finished: {} retrains in {:.1}s ({:.3}s each); projected full-scale (8760) {:.1}h",
        indices.len(),
        wall_seconds,
        result.seconds_per_retrain,
        result.projected_seconds(8760) / 3600.0
    );
    Ok(result)
}

// --- oracle result files --------------------------------------------------------

/// Write (sample_index, true_gain, run_loss) rows plus the base loss.
pub fn save_oracle(path: &Path, result: &OracleResult) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(w, "# base_loss={}", result.base_loss).map_err(io)?;
    writeln!(w, "sample_index\ttrue_gain\trun_loss").map_err(io)?;
    let mut rows: Vec<(usize, f64, f64)> = result
        .indices
        .iter()
        .zip(result.true_gains.iter().zip(result.per_run_losses.iter()))
        .map(|(i, (g, l))| (*i, *g, *l))
        .collect();
    rows.sort_by_key(|r| r.0);
    for (i, g, l) in rows {
        writeln!(w, "{i}\t{g}\t{l}").map_err(io)?;
    }
    Ok(())
}

pub fn load_oracle(path: &Path) -> Result<OracleResult> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut base_loss = f64::NAN;
    let mut indices = Vec::new();
    let mut true_gains = Vec::new();
    let mut per_run_losses = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with("sample_index") {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("base_loss=") {
                base_loss = v.parse().map_err(|_| Error::Data("bad base_loss".into()))?;
            }
            continue;
        }
        let cols: Vec<&str> = t.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Data(format!("bad oracle row '{t}'")));
        }
        indices.push(cols[0].parse().map_err(|_| Error::Data("bad index".into()))?);
        true_gains.push(cols[1].parse().map_err(|_| Error::Data("bad gain".into()))?);
        per_run_losses.push(cols[2].parse().map_err(|_| Error::Data("bad loss".into()))?);
    }
    Ok(OracleResult {
        indices,
        true_gains,
        base_loss,
        per_run_losses,
        wall_seconds: 0.0,
        seconds_per_retrain: 0.0,
    })
}

/// Resumable sweep: indices already present in `<path>.done` are skipped,
/// new results are merged and the final file is rewritten sorted.
#[allow(clippy::too_many_arguments)]
pub fn sweep_to_file(
    path: &Path,
    indices: &[usize],
    y1: &ImputationSet,
    y2: &ImputationSet,
    train_ss: &SampleSet,
    val_ss: &SampleSet,
    eval_ss: &SampleSet,
    arch: &Arch,
    cfg: &TrainConfig,
    timestep: Option<usize>,
) -> Result<OracleResult> {
    let done_path = path.with_extension("done");
    let mut done: BTreeSet<usize> = BTreeSet::new();
    let mut prior: Option<OracleResult> = None;
    if done_path.exists() && path.exists() {
        let content = std::fs::read_to_string(&done_path)
            .map_err(|e| Error::io(done_path.display().to_string(), e))?;
        for tok in content.split_whitespace() {
            done.insert(tok.parse().map_err(|_| Error::Data("bad done index".into()))?);
        }
        prior = Some(load_oracle(path)?);
        log::info!("oracle sweep: resuming, {} indices already done", done.len());
    }
    let remaining: Vec<usize> = indices.iter().copied().filter(|i| !done.contains(i)).collect();
    let fresh = oracle_sweep(&remaining, y1, y2, train_ss, val_ss, eval_ss, arch, cfg, timestep)?;

    let mut merged = fresh.clone();
    if let Some(prev) = prior {
        for ((i, g), l) in prev
            .indices
            .iter()
            .zip(prev.true_gains.iter())
            .zip(prev.per_run_losses.iter())
        {
            if done.contains(i) && indices.contains(i) {
                merged.indices.push(*i);
                merged.true_gains.push(*g);
                merged.per_run_losses.push(*l);
            }
        }
    }
    save_oracle(path, &merged)?;
    let listing: Vec<String> = merged.indices.iter().map(|i| i.to_string()).collect();
    std::fs::write(&done_path, listing.join("\n"))
        .map_err(|e| Error::io(done_path.display().to_string(), e))?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::Dims;
    use ndarray::{array, Array1};

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs: 25,
            patience: 25,
            batch_size: 16,
            seed,
        }
    }

    #[test]
    fn null_swap_gain_is_exactly_zero() {
        let fx = fixtures::masked_problem(12, 41);
        let mut same = fx.y_mean.clone();
        same.source_name = "same".into();
        let g = true_gain(
            2,
            &fx.y_mean,
            &same,
            &fx.train,
            &fx.validation,
            &fx.test,
            &Arch::Mlp { layers: 2, hidden: 6 },
            &quick_cfg(1),
            None,
        )
        .unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn sweep_is_deterministic_and_independent_across_partitions() {
        let fx = fixtures::masked_problem(12, 42);
        let arch = Arch::Mlp { layers: 2, hidden: 6 };
        let cfg = quick_cfg(2);
        let all = oracle_sweep(&[0, 1, 2, 3], &fx.y_mean, &fx.y_linear, &fx.train, &fx.validation, &fx.test, &arch, &cfg, None).unwrap();
        let again = oracle_sweep(&[0, 1, 2, 3], &fx.y_mean, &fx.y_linear, &fx.train, &fx.validation, &fx.test, &arch, &cfg, None).unwrap();
        assert_eq!(all.true_gains, again.true_gains);

        // Disjoint sweeps concatenate: runs do not interact.
        let left = oracle_sweep(&[0, 1], &fx.y_mean, &fx.y_linear, &fx.train, &fx.validation, &fx.test, &arch, &cfg, None).unwrap();
        let right = oracle_sweep(&[2, 3], &fx.y_mean, &fx.y_linear, &fx.train, &fx.validation, &fx.test, &arch, &cfg, None).unwrap();
        assert_eq!(all.true_gains[..2], left.true_gains[..]);
        assert_eq!(all.true_gains[2..], right.true_gains[..]);
        assert_eq!(all.base_loss, left.base_loss);

        // Empty index set still reports the base loss.
        let empty = oracle_sweep(&[], &fx.y_mean, &fx.y_linear, &fx.train, &fx.validation, &fx.test, &arch, &cfg, None).unwrap();
        assert!(empty.true_gains.is_empty());
        assert_eq!(empty.base_loss, all.base_loss);
    }

    #[test]
    fn oracle_matches_ols_closed_form_on_linear_model() {
        // Full-batch GD on a convex quadratic converges to the normal
        // equation solution, so the oracle gain must match the closed-form
        // loss difference between the two OLS solutions.
        let q = 2;
        let l2 = 1;
        let xs = [
            array![[1.0, 0.2]],
            array![[0.4, 1.0]],
            array![[-0.6, 0.8]],
            array![[0.9, -0.5]],
        ];
        let n = xs.len();
        let targets = array![[0.8], [0.3], [-0.2], [0.5]];
        let train_ss = fixtures::handmade_samples(xs.to_vec(), targets.clone(), q, l2);
        let eval_xs = [array![[0.5, 0.5]], array![[-0.3, 0.9]]];
        let eval_targets = array![[0.25], [0.1]];
        let mut eval_ss = fixtures::handmade_samples(eval_xs.to_vec(), eval_targets, q, l2);
        eval_ss.split_tag = crate::dataio::SplitTag::Test;

        let masks = Array2::from_elem((n, l2), true);
        let mut source_mask = vec![true; train_ss.t_total()];
        for m in source_mask.iter_mut().take(train_ss.l1) {
            *m = false;
        }
        let mask = crate::dataio::MaskSet { masks, realized_rate: 1.0, source_mask };
        let y1 = ImputationSet {
            labels: targets.clone(),
            source_name: "y1".into(),
            source_series: vec![0.0; train_ss.t_total()],
            mask: mask.clone(),
        };
        let mut y2_labels = targets.clone();
        y2_labels[[1, 0]] = -0.4;
        let y2 = ImputationSet {
            labels: y2_labels.clone(),
            source_name: "y2".into(),
            source_series: vec![0.0; train_ss.t_total()],
            mask,
        };

        let cfg = TrainConfig {
            learning_rate: 0.4,
            max_epochs: 4000,
            patience: 4000,
            batch_size: n,
            seed: 3,
        };
        let got = true_gain(1, &y1, &y2, &train_ss, &eval_ss, &eval_ss, &Arch::Linear, &cfg, None).unwrap();

        // OLS: theta = (X^T X)^-1 X^T y for each label choice (q=2 inverse
        // by hand).
        let solve_ols = |labels: &Array2<f64>| -> Array1<f64> {
            let mut xtx = [[0.0f64; 2]; 2];
            let mut xty = [0.0f64; 2];
            for (x, yrow) in xs.iter().zip(labels.rows()) {
                for a in 0..2 {
                    for b in 0..2 {
                        xtx[a][b] += x[[0, a]] * x[[0, b]];
                    }
                    xty[a] += x[[0, a]] * yrow[0];
                }
            }
            let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
            array![
                (xtx[1][1] * xty[0] - xtx[0][1] * xty[1]) / det,
                (xtx[0][0] * xty[1] - xtx[1][0] * xty[0]) / det
            ]
        };
        let loss_sum = |theta: &Array1<f64>| -> f64 {
            eval_xs
                .iter()
                .zip(eval_ss.targets.rows())
                .map(|(x, y)| {
                    let f = theta[0] * x[[0, 0]] + theta[1] * x[[0, 1]];
                    (f - y[0]) * (f - y[0])
                })
                .sum()
        };
        let expect = loss_sum(&solve_ols(&targets)) - loss_sum(&solve_ols(&y2_labels));
        assert!(
            (got - expect).abs() <= 1e-6 * expect.abs().max(1e-6),
            "oracle {got} vs closed form {expect}"
        );

        let _ = Dims::new(1, q, l2);
    }

    #[test]
    fn oracle_file_roundtrip_and_resume() {
        let fx = fixtures::masked_problem(12, 44);
        let arch = Arch::Mlp { layers: 2, hidden: 4 };
        let cfg = quick_cfg(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.tsv");

        let first = sweep_to_file(&path, &[0, 1], &fx.y_mean, &fx.y_linear, &fx.train, &fx.validation, &fx.test, &arch, &cfg, None).unwrap();
        assert_eq!(first.indices.len(), 2);

        // Second call adds index 2 and must keep the old results without
        // re-running them (gains identical to a fresh full sweep).
        let merged = sweep_to_file(&path, &[0, 1, 2], &fx.y_mean, &fx.y_linear, &fx.train, &fx.validation, &fx.test, &arch, &cfg, None).unwrap();
        let mut pairs: Vec<(usize, f64)> =
            merged.indices.iter().copied().zip(merged.true_gains.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        let fresh = oracle_sweep(&[0, 1, 2], &fx.y_mean, &fx.y_linear, &fx.train, &fx.validation, &fx.test, &arch, &cfg, None).unwrap();
        for ((i, g), (fi, fg)) in pairs.iter().zip(fresh.indices.iter().zip(fresh.true_gains.iter())) {
            assert_eq!(i, fi);
            assert_eq!(g, fg);
        }

        let loaded = load_oracle(&path).unwrap();
        assert_eq!(loaded.indices, vec![0, 1, 2]);
        assert_eq!(loaded.base_loss, merged.base_loss);
    }
}
