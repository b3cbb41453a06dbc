//! Deterministic mini-batch SGD with early stopping.
//!
//! The loop is intentionally sequential: gradients accumulate in sample-index
//! order inside each batch, the shuffle stream is seeded, and so the final
//! parameters and the recorded trajectory are bit-identical across runs.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::SampleSet;
use crate::error::{Error, Result};
use crate::model::{self, Arch, ModelParams};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// SGD at lr 0.1, up to 300 epochs, patience 10.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs: 300,
            patience: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("max_epochs, patience and batch_size must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Invalid("patience cannot exceed max_epochs".into()));
        }
        Ok(())
    }
}

/// Everything the trajectory-form estimator needs about a finished run.
#[derive(Debug, Clone)]
pub struct TrainTrajectory {
    /// checkpoints[e] holds theta at the START of epoch e+1 (so the last
    /// entry is the parameters the final epoch updated from).
    pub checkpoints: Vec<Array1<f64>>,
    /// Learning rate used in each recorded epoch.
    pub step_lrs: Vec<f64>,
    /// Batches of each epoch; together they partition the sample indices.
    pub batch_members: Vec<Vec<Vec<usize>>>,
    /// 1-based epoch whose end-of-epoch parameters were returned.
    pub best_epoch: usize,
    /// Number of recorded epochs.
    pub t_epochs: usize,
    pub arch: Arch,
}

impl TrainTrajectory {
    /// Size of the batch containing sample i in epoch e (0-based), if any.
    pub fn batch_size_of(&self, epoch: usize, sample: usize) -> Option<usize> {
        self.batch_members[epoch]
            .iter()
            .find(|b| b.contains(&sample))
            .map(|b| b.len())
    }
}

/// Train `arch` on the sample inputs with the given label matrix,
/// early-stopping on the validation pairs. Returns the best-validation
/// parameters and the full trajectory.
pub fn train(
    arch: &Arch,
    train_ss: &SampleSet,
    train_labels: &Array2<f64>,
    val_ss: &SampleSet,
    val_labels: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainTrajectory)> {
    cfg.validate()?;
    let dims = train_ss.dims();
    if train_labels.nrows() != train_ss.n() || train_labels.ncols() != train_ss.l2 {
        return Err(Error::Shape("train label matrix does not match the sample set".into()));
    }
    if val_labels.nrows() != val_ss.n() || val_labels.ncols() != val_ss.l2 {
        return Err(Error::Shape("validation label matrix does not match the sample set".into()));
    }
    let n = train_ss.n();
    let mut params = model::init_params(arch, &dims, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::substream(cfg.seed, "shuffle"));

    let mut checkpoints = Vec::new();
    let mut step_lrs = Vec::new();
    let mut batch_members = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_theta = params.theta.clone();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        checkpoints.push(params.theta.clone());
        step_lrs.push(cfg.learning_rate);
        indices.shuffle(&mut rng);
        let mut epoch_batches = Vec::new();
        for batch in indices.chunks(cfg.batch_size) {
            let mut grad = Array1::<f64>::zeros(params.param_count());
            for &i in batch {
                let y = train_labels.row(i).to_owned();
                let g = model::param_grad(&params, &train_ss.inputs[i], &y)?;
                grad += &g;
            }
            grad /= batch.len() as f64;
            params.theta.scaled_add(-cfg.learning_rate, &grad);
            epoch_batches.push(batch.to_vec());
        }
        batch_members.push(epoch_batches);

        let train_loss = mean_mse(&params, train_ss, Some(train_labels))?;
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch}: loss {train_loss}"
            )));
        }
        let val_loss = mean_mse(&params, val_ss, Some(val_labels))?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "validation loss diverged at epoch {epoch}: {val_loss}"
            )));
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_theta = params.theta.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let t_epochs = checkpoints.len();
    let best = ModelParams::from_theta(best_theta, arch.clone(), dims)?;
    Ok((
        best,
        TrainTrajectory {
            checkpoints,
            step_lrs,
            batch_members,
            best_epoch,
            t_epochs,
            arch: arch.clone(),
        },
    ))
}

fn mean_mse(p: &ModelParams, ss: &SampleSet, labels: Option<&Array2<f64>>) -> Result<f64> {
    if ss.n() == 0 {
        return Err(Error::Data("cannot evaluate an empty sample set".into()));
    }
    let mut total = 0.0;
    for i in 0..ss.n() {
        let f = model::forward(p, &ss.inputs[i])?;
        let y = match labels {
            Some(m) => m.row(i).to_owned(),
            None => ss.target_row(i),
        };
        total += model::loss(&f, &y)?.value;
    }
    Ok(total / ss.n() as f64)
}

/// Mean per-sample MSE against the split's ground-truth targets.
pub fn evaluate(p: &ModelParams, ss: &SampleSet) -> Result<f64> {
    mean_mse(p, ss, None)
}

/// Mean per-sample MSE against an explicit label matrix.
pub fn evaluate_with_labels(p: &ModelParams, ss: &SampleSet, labels: &Array2<f64>) -> Result<f64> {
    mean_mse(p, ss, Some(labels))
}

// --- trajectory directory ----------------------------------------------------

/// Write one checkpoint file per epoch plus a manifest.
pub fn save_trajectory(dir: &Path, traj: &TrainTrajectory, dims: &crate::model::Dims) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest_path = dir.join("manifest.tsv");
    let file = std::fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(manifest_path.display().to_string(), e);
    writeln!(w, "# best_epoch={}", traj.best_epoch).map_err(io)?;
    writeln!(w, "epoch\tlr\tcheckpoint\tbatches").map_err(io)?;
    for e in 0..traj.t_epochs {
        let ckpt = format!("epoch_{:04}.ckpt", e + 1);
        let batches = format!("epoch_{:04}.batches", e + 1);
        writeln!(w, "{}\t{}\t{ckpt}\t{batches}", e + 1, traj.step_lrs[e]).map_err(io)?;
        let p = ModelParams::from_theta(traj.checkpoints[e].clone(), traj.arch.clone(), *dims)?;
        model::save_checkpoint(&dir.join(&ckpt), &p)?;
        let bpath = dir.join(&batches);
        let bfile = std::fs::File::create(&bpath).map_err(|e2| Error::io(bpath.display().to_string(), e2))?;
        let mut bw = BufWriter::new(bfile);
        for batch in &traj.batch_members[e] {
            let joined: Vec<String> = batch.iter().map(|i| i.to_string()).collect();
            writeln!(bw, "{}", joined.join(",")).map_err(|e2| Error::io(bpath.display().to_string(), e2))?;
        }
    }
    Ok(())
}

pub fn load_trajectory(dir: &Path) -> Result<TrainTrajectory> {
    let manifest_path = dir.join("manifest.tsv");
    let file = std::fs::File::open(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut best_epoch = 0usize;
    let mut rows: Vec<(usize, f64, String, String)> = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("best_epoch=") {
                best_epoch = v
                    .parse()
                    .map_err(|_| Error::Data("bad best_epoch in trajectory manifest".into()))?;
            }
            continue;
        }
        if t.starts_with("epoch\t") {
            continue;
        }
        let cols: Vec<&str> = t.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Data(format!("bad trajectory manifest row '{t}'")));
        }
        let epoch: usize = cols[0].parse().map_err(|_| Error::Data("bad epoch".into()))?;
        let lr: f64 = cols[1].parse().map_err(|_| Error::Data("bad lr".into()))?;
        rows.push((epoch, lr, cols[2].to_string(), cols[3].to_string()));
    }
    if rows.is_empty() {
        return Err(Error::Data("trajectory manifest has no epochs".into()));
    }
    let mut checkpoints = Vec::with_capacity(rows.len());
    let mut step_lrs = Vec::with_capacity(rows.len());
    let mut batch_members = Vec::with_capacity(rows.len());
    let mut arch = None;
    for (_, lr, ckpt, batches) in &rows {
        let p = model::load_checkpoint(&dir.join(ckpt))?;
        arch = Some(p.arch.clone());
        checkpoints.push(p.theta);
        step_lrs.push(*lr);
        let bpath = dir.join(batches);
        let bfile = std::fs::File::open(&bpath).map_err(|e| Error::io(bpath.display().to_string(), e))?;
        let mut epoch_batches = Vec::new();
        for line in BufReader::new(bfile).lines() {
            let line = line.map_err(|e| Error::io(bpath.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let batch: Vec<usize> = line
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Data("bad batch index".into())))
                .collect::<Result<_>>()?;
            epoch_batches.push(batch);
        }
        batch_members.push(epoch_batches);
    }
    let t_epochs = checkpoints.len();
    Ok(TrainTrajectory {
        checkpoints,
        step_lrs,
        batch_members,
        best_epoch,
        t_epochs,
        arch: arch.expect("at least one checkpoint"),
    })
}
