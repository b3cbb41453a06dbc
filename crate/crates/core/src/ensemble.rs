//! Splice two imputation sets by thresholding the gain matrix, then retrain.
//!
//! The threshold is the nearest-rank (1-c) percentile of the strictly
//! positive gains; entries with gain strictly above it take the candidate
//! label, everything else keeps the baseline. Ties at the threshold are not
//! replaced, which bounds the replacement count by ceil(c% of the positive
//! entries).

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataio::{ImputationSet, SampleSet};
use crate::error::{Error, Result};
use crate::gain::GainMatrix;
use crate::model::{Arch, ModelParams};
use crate::train::{train, TrainConfig, TrainTrajectory};

/// Inputs of one ensembling pass.
#[derive(Debug, Clone)]
pub struct EnsembleSpec<'a> {
    /// Percentage of positive-gain entries eligible for replacement.
    pub replace_percent: f64,
    pub gain: &'a GainMatrix,
    /// Baseline labels (kept where the gain does not clear the threshold).
    pub y1: &'a ImputationSet,
    /// Candidate labels (spliced in above the threshold).
    pub y2: &'a ImputationSet,
}

/// Nearest-rank (1-c) percentile of the strictly positive gains. With
/// c >= 100 every positive entry clears the threshold, so 0 is returned;
/// `None` when there is no positive gain at all.
pub fn positive_gain_threshold(values: &GainMatrix, replace_percent: f64) -> Option<f64> {
    let mut positive: Vec<f64> = values.values.iter().copied().filter(|v| *v > 0.0).collect();
    if positive.is_empty() {
        return None;
    }
    if replace_percent >= 100.0 {
        return Some(0.0);
    }
    positive.sort_by(|a, b| a.partial_cmp(b).expect("finite gains"));
    let n = positive.len();
    let rank = ((100.0 - replace_percent) / 100.0 * n as f64).ceil() as usize;
    if rank == 0 {
        return Some(0.0);
    }
    Some(positive[rank - 1])
}

/// Outcome of [`combine`], with the spliced labels and bookkeeping.
#[derive(Debug, Clone)]
pub struct CombineOutcome {
    pub spliced: ImputationSet,
    /// Threshold actually applied (None: no positive gains, pure baseline).
    pub threshold: Option<f64>,
    pub replaced: usize,
}

/// Algorithm: threshold the positive gains at the (1-c) percentile and take
/// the candidate label strictly above it. `ss` supplies the window geometry
/// for projecting the splice back onto the source series.
pub fn combine(spec: &EnsembleSpec, ss: &SampleSet) -> Result<CombineOutcome> {
    if !(spec.replace_percent > 0.0 && spec.replace_percent <= 100.0) {
        return Err(Error::Invalid(format!(
            "replace_percent must be in (0,100], got {}",
            spec.replace_percent
        )));
    }
    if spec.y1.labels.dim() != spec.y2.labels.dim() || spec.gain.values.dim() != spec.y1.labels.dim() {
        return Err(Error::Shape("gain matrix and imputation pair are misaligned".into()));
    }
    if spec.y1.mask.masks != spec.y2.mask.masks {
        return Err(Error::Shape("imputation pair fills different masks".into()));
    }
    let threshold = positive_gain_threshold(spec.gain, spec.replace_percent);
    let mut labels = spec.y1.labels.clone();
    let mut source_series = spec.y1.source_series.clone();
    let mut replaced = 0usize;
    if let Some(thr) = threshold {
        for ((i, l), g) in spec.gain.values.indexed_iter() {
            if *g > thr {
                labels[[i, l]] = spec.y2.labels[[i, l]];
                replaced += 1;
            }
        }
        // Project the splice back onto the source series for export: each
        // masked position takes the value of the covering window with the
        // largest |gain| (exact for tiling windows, a tie-broken projection
        // when windows overlap).
        let n = labels.nrows();
        let l2 = labels.ncols();
        let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; source_series.len()];
        for i in 0..n {
            for l in 0..l2 {
                let pos = ss.target_source_pos(i, l);
                let g = spec.gain.values[[i, l]].abs();
                let better = match best[pos] {
                    None => true,
                    Some((bg, _, _)) => g > bg,
                };
                if better {
                    best[pos] = Some((g, i, l));
                }
            }
        }
        for (pos, slot) in best.iter().enumerate() {
            if let Some((_, i, l)) = slot {
                if spec.y1.mask.source_mask[pos] {
                    source_series[pos] = labels[[*i, *l]];
                }
            }
        }
    }
    let spliced = ImputationSet {
        labels,
        source_name: format!("ensemble({},{})", spec.y1.source_name, spec.y2.source_name),
        source_series,
        mask: spec.y1.mask.clone(),
    };
    Ok(CombineOutcome { spliced, threshold, replaced })
}

/// Result of a full ensembling pass: splice, retrain, compare.
#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub baseline_mse: f64,
    pub ensemble_mse: f64,
    pub threshold: Option<f64>,
    pub replaced: usize,
}

/// Splice per `spec`, retrain on the spliced labels, and report test MSE
/// against the baseline model (trained on y1 under the same config).
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    spec: &EnsembleSpec,
    arch: &Arch,
    train_ss: &SampleSet,
    val_ss: &SampleSet,
    eval_ss: &SampleSet,
    cfg: &TrainConfig,
    baseline: Option<&ModelParams>,
) -> Result<(ModelParams, TrainTrajectory, EnsembleReport)> {
    let outcome = combine(spec, train_ss)?;
    let val_labels = val_ss.targets.clone();
    let baseline_mse = match baseline {
        Some(p) => crate::train::evaluate(p, eval_ss)?,
        None => {
            let (p, _) = train(arch, train_ss, &spec.y1.labels, val_ss, &val_labels, cfg)?;
            crate::train::evaluate(&p, eval_ss)?
        }
    };
    let (model, traj) = train(arch, train_ss, &outcome.spliced.labels, val_ss, &val_labels, cfg)?;
    let ensemble_mse = crate::train::evaluate(&model, eval_ss)?;
    Ok((
        model,
        traj,
        EnsembleReport {
            baseline_mse,
            ensemble_mse,
            threshold: outcome.threshold,
            replaced: outcome.replaced,
        },
    ))
}

/// Export spliced labels in the imputation file format with provenance.
pub fn save_spliced(
    path: &Path,
    ss: &SampleSet,
    outcome: &CombineOutcome,
    estimator: &str,
    replace_percent: f64,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(w, "# source={}", outcome.spliced.source_name).map_err(io)?;
    writeln!(w, "# estimator={estimator}").map_err(io)?;
    writeln!(w, "# replace_percent={replace_percent}").map_err(io)?;
    match outcome.threshold {
        Some(t) => writeln!(w, "# threshold={t}").map_err(io)?,
        None => writeln!(w, "# threshold=none").map_err(io)?,
    }
    writeln!(w, "timestamp\tvalue").map_err(io)?;
    for (p, m) in outcome.spliced.mask.source_mask.iter().enumerate() {
        if *m {
            writeln!(
                w,
                "{}\t{}",
                ss.ts_kind.format(ss.source_timestamps[p]),
                outcome.spliced.source_series[p]
            )
            .map_err(io)?;
        }
    }
    Ok(())
}
