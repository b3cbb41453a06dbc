//! Series ingest, windowing, missing-data simulation and imputation.
//!
//! The raw series is always complete; missingness is simulated by
//! [`generate_mask`] on the contiguous source series (gap runs can span
//! window boundaries) and the windows are then cut identically to
//! [`window`]. Imputations fill the masked source positions and are windowed
//! into per-sample label vectors.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Dims;

/// Accepted datetime layouts for column 0, tried in order.
const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
];

/// How the timestamp column is interpreted (and re-serialized).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampKind {
    /// Plain integer index.
    Index,
    /// Datetime stored as epoch seconds; the payload picks the layout used
    /// when writing files back out.
    DateTime(usize),
}

impl TimestampKind {
    pub fn parse(s: &str) -> Result<(i64, TimestampKind)> {
        let s = s.trim();
        if let Ok(v) = s.parse::<i64>() {
            return Ok((v, TimestampKind::Index));
        }
        for (idx, fmt) in DATETIME_FORMATS.iter().enumerate() {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Ok((dt.and_utc().timestamp(), TimestampKind::DateTime(idx)));
            }
        }
        Err(Error::Data(format!("unparseable timestamp '{s}'")))
    }

    pub fn format(&self, ts: i64) -> String {
        match self {
            TimestampKind::Index => ts.to_string(),
            TimestampKind::DateTime(idx) => chrono::DateTime::from_timestamp(ts, 0)
                .map(|dt| dt.naive_utc().format(DATETIME_FORMATS[*idx]).to_string())
                .unwrap_or_else(|| ts.to_string()),
        }
    }

    /// Step ordinal used for calendar-position arithmetic. Datetime series
    /// are assumed hourly, matching the datasets this targets.
    pub fn ordinal(&self, ts: i64) -> i64 {
        match self {
            TimestampKind::Index => ts,
            TimestampKind::DateTime(_) => ts.div_euclid(3600),
        }
    }
}

/// A complete multivariate series: T_total rows by D feature columns.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub values: Array2<f64>,
    pub timestamps: Vec<i64>,
    pub ts_kind: TimestampKind,
    pub feature_names: Vec<String>,
    /// Which column is forecast.
    pub target_index: usize,
}

impl TimeSeriesDataset {
    pub fn new(
        values: Array2<f64>,
        timestamps: Vec<i64>,
        ts_kind: TimestampKind,
        feature_names: Vec<String>,
        target_index: usize,
    ) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Data("empty table".into()));
        }
        if timestamps.len() != values.nrows() {
            return Err(Error::Shape("timestamp count != row count".into()));
        }
        if !timestamps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Data("non-monotone timestamps".into()));
        }
        if target_index >= values.ncols() {
            return Err(Error::Invalid(format!(
                "target_index {} out of range for {} columns",
                target_index,
                values.ncols()
            )));
        }
        if let Some((row, col)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|((r, c), _)| (r, c))
        {
            return Err(Error::Data(format!("non-finite value at ({row},{col})")));
        }
        Ok(TimeSeriesDataset { values, timestamps, ts_kind, feature_names, target_index })
    }

    pub fn t_total(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn target_column(&self) -> ArrayView1<'_, f64> {
        self.values.column(self.target_index)
    }

    /// Rows with start <= timestamp < end.
    pub fn slice_by_time(&self, start: i64, end: i64) -> Result<TimeSeriesDataset> {
        let lo = self.timestamps.partition_point(|t| *t < start);
        let hi = self.timestamps.partition_point(|t| *t < end);
        if lo >= hi {
            return Err(Error::Data(format!("time range [{start}, {end}) selects no rows")));
        }
        TimeSeriesDataset::new(
            self.values.slice(ndarray::s![lo..hi, ..]).to_owned(),
            self.timestamps[lo..hi].to_vec(),
            self.ts_kind,
            self.feature_names.clone(),
            self.target_index,
        )
    }

    /// Contiguous train/validation/test split by row fractions.
    pub fn split_fractions(&self, train: f64, validation: f64) -> Result<(Self, Self, Self)> {
        if !(0.0..1.0).contains(&train) || !(0.0..1.0).contains(&validation) || train + validation >= 1.0 {
            return Err(Error::Invalid("split fractions must be positive and sum below 1".into()));
        }
        let t = self.t_total();
        let a = (t as f64 * train).round() as usize;
        let b = (t as f64 * (train + validation)).round() as usize;
        let cut = |lo: usize, hi: usize| {
            TimeSeriesDataset::new(
                self.values.slice(ndarray::s![lo..hi, ..]).to_owned(),
                self.timestamps[lo..hi].to_vec(),
                self.ts_kind,
                self.feature_names.clone(),
                self.target_index,
            )
        };
        Ok((cut(0, a)?, cut(a, b)?, cut(b, t)?))
    }
}

/// Per-feature z-score statistics fitted on the training split.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &TimeSeriesDataset) -> Normalizer {
        let t = ds.t_total() as f64;
        let mut mean = Vec::with_capacity(ds.d());
        let mut std = Vec::with_capacity(ds.d());
        for col in ds.values.columns() {
            let m = col.sum() / t;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t;
            mean.push(m);
            std.push(var.sqrt().max(1e-12));
        }
        Normalizer { mean, std }
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        if self.mean.len() != ds.d() {
            return Err(Error::Shape("normalizer fitted on different column count".into()));
        }
        let mut values = ds.values.clone();
        for (c, mut col) in values.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        TimeSeriesDataset::new(values, ds.timestamps.clone(), ds.ts_kind, ds.feature_names.clone(), ds.target_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Validation => write!(f, "validation"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

impl SplitTag {
    pub fn parse(s: &str) -> Result<SplitTag> {
        match s {
            "train" => Ok(SplitTag::Train),
            "validation" => Ok(SplitTag::Validation),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// Windowed supervised pairs cut from one split of the source series.
///
/// The split's source rows are kept so that masking and imputation can work
/// on the contiguous series and stay aligned with the windows.
#[derive(Debug, Clone)]
pub struct SampleSet {
    /// n input windows, each d x l1.
    pub inputs: Vec<Array2<f64>>,
    /// n ground-truth target windows (n x l2).
    pub targets: Array2<f64>,
    pub split_tag: SplitTag,
    pub l1: usize,
    pub l2: usize,
    pub stride: usize,
    /// Source rows of this split (T x D), clean values.
    pub source_values: Array2<f64>,
    pub source_timestamps: Vec<i64>,
    pub ts_kind: TimestampKind,
    pub target_index: usize,
}

impl SampleSet {
    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.source_values.ncols(), self.l1, self.l2)
    }

    pub fn t_total(&self) -> usize {
        self.source_values.nrows()
    }

    /// Source position of target entry (i, j).
    pub fn target_source_pos(&self, i: usize, j: usize) -> usize {
        self.l1 + i * self.stride + j
    }

    /// Source positions that appear in at least one target window.
    pub fn target_span(&self) -> std::ops::Range<usize> {
        self.l1..self.l1 + (self.n() - 1) * self.stride + self.l2
    }

    /// Clean target column of the source rows.
    pub fn source_target_series(&self) -> Vec<f64> {
        self.source_values.column(self.target_index).to_vec()
    }

    /// Target window i as an owned vector.
    pub fn target_row(&self, i: usize) -> Array1<f64> {
        self.targets.row(i).to_owned()
    }

    /// Rebuild the input windows from a replacement target series (other
    /// feature columns untouched). Targets stay ground truth.
    pub fn with_imputed_inputs(&self, series: &[f64]) -> Result<SampleSet> {
        if series.len() != self.t_total() {
            return Err(Error::Shape("replacement series length != source length".into()));
        }
        let mut out = self.clone();
        for (i, x) in out.inputs.iter_mut().enumerate() {
            let start = i * self.stride;
            for j in 0..self.l1 {
                x[[self.target_index, j]] = series[start + j];
            }
        }
        Ok(out)
    }
}

/// Cut contiguous windows: sample i reads inputs at [i*stride, i*stride+l1)
/// and targets at the following l2 positions of the target column.
pub fn window(ds: &TimeSeriesDataset, l1: usize, l2: usize, stride: usize, tag: SplitTag) -> Result<SampleSet> {
    if l1 < 1 || l2 < 1 || stride < 1 {
        return Err(Error::Invalid("l1, l2 and stride must be positive".into()));
    }
    let t = ds.t_total();
    if t < l1 + l2 {
        return Err(Error::Data(format!(
            "series too short: {t} rows but windows need at least {}",
            l1 + l2
        )));
    }
    let n = (t - l1 - l2) / stride + 1;
    let d = ds.d();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Array2::zeros((n, l2));
    let target = ds.target_column();
    for i in 0..n {
        let start = i * stride;
        let mut x = Array2::zeros((d, l1));
        for c in 0..d {
            for j in 0..l1 {
                x[[c, j]] = ds.values[[start + j, c]];
            }
        }
        inputs.push(x);
        for j in 0..l2 {
            targets[[i, j]] = target[start + l1 + j];
        }
    }
    Ok(SampleSet {
        inputs,
        targets,
        split_tag: tag,
        l1,
        l2,
        stride,
        source_values: ds.values.clone(),
        source_timestamps: ds.timestamps.clone(),
        ts_kind: ds.ts_kind,
        target_index: ds.target_index,
    })
}

/// Block-missingness specification.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    /// Requested missing fraction, in (0, 1).
    pub missing_rate: f64,
    /// Admissible gap lengths, drawn uniformly.
    pub run_lengths: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    /// 40% missing with gap lengths {2,4,6,12,24,48,96,120}.
    pub fn default_protocol(seed: u64) -> MaskSpec {
        MaskSpec {
            missing_rate: 0.40,
            run_lengths: vec![2, 4, 6, 12, 24, 48, 96, 120],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.missing_rate > 0.0 && self.missing_rate < 1.0) {
            return Err(Error::Invalid(format!(
                "missing_rate must be in (0,1), got {}",
                self.missing_rate
            )));
        }
        if self.run_lengths.is_empty() || self.run_lengths.iter().any(|l| *l == 0) {
            return Err(Error::Invalid("run_lengths must be nonempty and positive".into()));
        }
        Ok(())
    }
}

/// Missingness realization: true = masked (value will be imputed).
#[derive(Debug, Clone)]
pub struct MaskSet {
    /// Window-aligned masks (n x l2).
    pub masks: Array2<bool>,
    /// Achieved missing fraction over the maskable span.
    pub realized_rate: f64,
    /// Mask over the full source rows (positions outside the target span
    /// are never masked).
    pub source_mask: Vec<bool>,
}

impl MaskSet {
    pub fn masked_count(&self) -> usize {
        self.masks.iter().filter(|m| **m).count()
    }

    fn from_source(ss: &SampleSet, source_mask: Vec<bool>) -> MaskSet {
        let n = ss.n();
        let mut masks = Array2::from_elem((n, ss.l2), false);
        for i in 0..n {
            for j in 0..ss.l2 {
                masks[[i, j]] = source_mask[ss.target_source_pos(i, j)];
            }
        }
        let span = ss.target_span();
        let masked = source_mask[span.clone()].iter().filter(|m| **m).count();
        let realized_rate = masked as f64 / span.len() as f64;
        MaskSet { masks, realized_rate, source_mask }
    }
}

/// Draw non-overlapping gap runs over the target span until the requested
/// rate is reached; the final run is clipped so the realized rate lands on
/// ceil(rate * span) / span exactly. Deterministic given the seed.
pub fn generate_mask(ss: &SampleSet, spec: &MaskSpec) -> Result<MaskSet> {
    spec.validate()?;
    let span = ss.target_span();
    let s_len = span.len();
    let target = ((spec.missing_rate * s_len as f64).ceil() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut source_mask = vec![false; ss.t_total()];
    let mut count = 0usize;
    let mut attempts = 0usize;
    let max_attempts = 1000 + 200 * s_len;
    while count < target {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Data(format!(
                "missing_rate {} unreachable with run_lengths {:?} on span of {s_len}",
                spec.missing_rate, spec.run_lengths
            )));
        }
        let len = spec.run_lengths[rng.random_range(0..spec.run_lengths.len())];
        if len > s_len {
            continue;
        }
        let start = span.start + rng.random_range(0..=s_len - len);
        if source_mask[start..start + len].iter().any(|m| *m) {
            continue;
        }
        let take = len.min(target - count);
        for m in source_mask[start..start + take].iter_mut() {
            *m = true;
        }
        count += take;
    }
    Ok(MaskSet::from_source(ss, source_mask))
}

/// Built-in imputation methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputeMethod {
    /// Calendar-position average over the split's observed values; `period`
    /// is the cycle length in steps (24 for hourly-daily data).
    Mean { period: usize },
    /// Straight line between nearest observed neighbors, constant at ends.
    Linear,
}

impl ImputeMethod {
    pub fn name(&self) -> String {
        match self {
            ImputeMethod::Mean { .. } => "mean".into(),
            ImputeMethod::Linear => "linear".into(),
        }
    }
}

/// One imputation of the masked labels.
#[derive(Debug, Clone)]
pub struct ImputationSet {
    /// Per-sample label vectors (n x l2): imputed at masked positions,
    /// ground truth elsewhere.
    pub labels: Array2<f64>,
    /// Identifier: mean | linear | external:<name> | spliced pairs.
    pub source_name: String,
    /// Imputed target column over the split's source rows.
    pub source_series: Vec<f64>,
    /// The mask this imputation fills.
    pub mask: MaskSet,
}

impl ImputationSet {
    /// Window an imputed source series into label vectors.
    pub fn from_series(ss: &SampleSet, mask: &MaskSet, series: Vec<f64>, name: impl Into<String>) -> Result<ImputationSet> {
        if series.len() != ss.t_total() {
            return Err(Error::Shape("imputed series length != source length".into()));
        }
        if let Some(p) = series.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite imputed value at position {p}")));
        }
        let clean = ss.source_target_series();
        for (p, m) in mask.source_mask.iter().enumerate() {
            if !m && series[p] != clean[p] {
                return Err(Error::Data(format!("imputation altered observed position {p}")));
            }
        }
        let n = ss.n();
        let mut labels = Array2::zeros((n, ss.l2));
        for i in 0..n {
            for j in 0..ss.l2 {
                labels[[i, j]] = series[ss.target_source_pos(i, j)];
            }
        }
        Ok(ImputationSet {
            labels,
            source_name: name.into(),
            source_series: series,
            mask: mask.clone(),
        })
    }

    /// Label window i as an owned vector.
    pub fn label_row(&self, i: usize) -> Array1<f64> {
        self.labels.row(i).to_owned()
    }
}

/// Fill masked positions of the split's target series.
pub fn impute(ss: &SampleSet, mask: &MaskSet, method: ImputeMethod) -> Result<ImputationSet> {
    let clean = ss.source_target_series();
    let t = clean.len();
    let mut series = clean.clone();
    match method {
        ImputeMethod::Mean { period } => {
            if period == 0 {
                return Err(Error::Invalid("mean imputation period must be positive".into()));
            }
            let mut sums = vec![0.0; period];
            let mut counts = vec![0usize; period];
            for p in 0..t {
                if !mask.source_mask[p] {
                    let pos = ss.ts_kind.ordinal(ss.source_timestamps[p]).rem_euclid(period as i64) as usize;
                    sums[pos] += clean[p];
                    counts[pos] += 1;
                }
            }
            for p in 0..t {
                if mask.source_mask[p] {
                    let pos = ss.ts_kind.ordinal(ss.source_timestamps[p]).rem_euclid(period as i64) as usize;
                    if counts[pos] == 0 {
                        return Err(Error::Data(format!(
                            "calendar position {pos} has zero observed values"
                        )));
                    }
                    series[p] = sums[pos] / counts[pos] as f64;
                }
            }
        }
        ImputeMethod::Linear => {
            linear_fill(&mut series, &mask.source_mask)?;
        }
    }
    ImputationSet::from_series(ss, mask, series, method.name())
}

/// In-place linear interpolation of masked runs.
fn linear_fill(series: &mut [f64], masked: &[bool]) -> Result<()> {
    let t = series.len();
    if masked.iter().all(|m| *m) {
        return Err(Error::Data("cannot interpolate: every position is masked".into()));
    }
    let mut p = 0;
    while p < t {
        if !masked[p] {
            p += 1;
            continue;
        }
        let run_start = p;
        while p < t && masked[p] {
            p += 1;
        }
        let run_end = p; // exclusive
        let left = run_start.checked_sub(1).filter(|q| !masked[*q]);
        let right = (run_end < t).then_some(run_end);
        match (left, right) {
            (Some(a), Some(b)) => {
                let (va, vb) = (series[a], series[b]);
                let gap = (b - a) as f64;
                for q in run_start..run_end {
                    let w = (q - a) as f64 / gap;
                    series[q] = va + w * (vb - va);
                }
            }
            (Some(a), None) => {
                for q in run_start..run_end {
                    series[q] = series[a];
                }
            }
            (None, Some(b)) => {
                for q in run_start..run_end {
                    series[q] = series[b];
                }
            }
            (None, None) => unreachable!("fully-masked series rejected above"),
        }
    }
    Ok(())
}

/// Ingest an externally-produced imputation: delimited (timestamp, value)
/// rows covering every masked source position. Observed positions are forced
/// to ground truth.
pub fn load_external_imputation(path: &Path, ss: &SampleSet, mask: &MaskSet) -> Result<ImputationSet> {
    let rows = read_two_column_file(path)?;
    let mut by_ts: HashMap<i64, f64> = HashMap::with_capacity(rows.len());
    let known: HashMap<i64, usize> = ss
        .source_timestamps
        .iter()
        .enumerate()
        .map(|(p, ts)| (*ts, p))
        .collect();
    for (ts_str, value) in rows {
        let (ts, _) = TimestampKind::parse(&ts_str)?;
        if !known.contains_key(&ts) {
            return Err(Error::Data(format!(
                "imputation file {} has timestamp {ts_str} not present in the series",
                path.display()
            )));
        }
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite imputation value at timestamp {ts_str}"
            )));
        }
        by_ts.insert(ts, value);
    }
    let mut series = ss.source_target_series();
    for (p, m) in mask.source_mask.iter().enumerate() {
        if *m {
            let ts = ss.source_timestamps[p];
            let v = by_ts.get(&ts).ok_or_else(|| {
                Error::Data(format!(
                    "imputation file {} is missing masked timestamp {}",
                    path.display(),
                    ss.ts_kind.format(ts)
                ))
            })?;
            series[p] = *v;
        }
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "file".into());
    ImputationSet::from_series(ss, mask, series, format!("external:{stem}"))
}

// --- toy simulation (imputation accuracy vs forecast usefulness) -----------

/// Keep positions {k*n_keep} and {k*n_keep + 1}, linearly interpolate the
/// gaps, and optionally add Gaussian observation noise everywhere.
pub fn toy_variant(
    base: &TimeSeriesDataset,
    n_keep: usize,
    noise_mean: f64,
    noise_std: f64,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if n_keep < 2 {
        return Err(Error::Invalid("n_keep must be at least 2".into()));
    }
    let t = base.t_total();
    let truth: Vec<f64> = base.target_column().to_vec();
    let mut masked = vec![true; t];
    for (p, m) in masked.iter_mut().enumerate() {
        if p % n_keep == 0 || (p % n_keep == 1 && p >= n_keep) {
            *m = false;
        }
    }
    let mut series = truth.clone();
    linear_fill(&mut series, &masked)?;
    if noise_std > 0.0 || noise_mean != 0.0 {
        let normal = Normal::new(noise_mean, noise_std.max(0.0))
            .map_err(|e| Error::Invalid(format!("bad noise parameters: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in series.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let mut values = base.values.clone();
    for (p, v) in series.iter().enumerate() {
        values[[p, base.target_index]] = *v;
    }
    TimeSeriesDataset::new(values, base.timestamps.clone(), base.ts_kind, base.feature_names.clone(), base.target_index)
}

/// The two toy cases: case I observes every {n_keep*k, n_keep*k+1} (denser)
/// and adds noise after interpolation; case II observes every
/// {(n_keep+2)*k, (n_keep+2)*k+1} and only interpolates.
pub fn simulate_toy(
    n_keep: usize,
    noise_mean: f64,
    noise_std: f64,
    base: &TimeSeriesDataset,
    seed: u64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if n_keep != 4 && n_keep != 6 {
        return Err(Error::Invalid("n_keep must be 4 or 6".into()));
    }
    let case_i = toy_variant(base, n_keep, noise_mean, noise_std, seed)?;
    let case_ii = toy_variant(base, n_keep + 2, 0.0, 0.0, seed)?;
    Ok((case_i, case_ii))
}

/// Mean squared difference between the target columns of two datasets.
pub fn series_mse(a: &TimeSeriesDataset, b: &TimeSeriesDataset) -> Result<f64> {
    if a.t_total() != b.t_total() {
        return Err(Error::Shape("series lengths differ".into()));
    }
    let n = a.t_total() as f64;
    Ok(a.target_column()
        .iter()
        .zip(b.target_column().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

// --- synthetic benchmark series ---------------------------------------------

/// Hourly load-shaped series: daily profile with strong harmonics, weekend
/// damping, and AR(1) observation noise. Feature columns beyond the first
/// are temperature-like covariates.
pub fn generate_synthetic(days: usize, d: usize, seed: u64) -> Result<TimeSeriesDataset> {
    if days == 0 || d == 0 {
        return Err(Error::Invalid("days and d must be positive".into()));
    }
    let t = days * 24;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Array2::zeros((t, d));
    let mut ar = 0.0;
    let two_pi = std::f64::consts::TAU;
    for p in 0..t {
        let h = (p % 24) as f64;
        let dow = (p / 24) % 7;
        let daily = (two_pi * h / 24.0 - 1.0).sin()
            + 0.55 * (2.0 * two_pi * h / 24.0 + 0.7).sin()
            + 0.25 * (3.0 * two_pi * h / 24.0 + 0.3).sin();
        let week = if dow >= 5 { 0.8 } else { 1.0 };
        ar = 0.9 * ar + 0.05 * normal.sample(&mut rng);
        values[[p, 0]] = 10.0 + 3.0 * daily * week + ar;
        for c in 1..d {
            let phase = 0.4 * c as f64;
            values[[p, c]] = 5.0 + 2.0 * (two_pi * h / 24.0 + phase).sin() + 0.1 * normal.sample(&mut rng);
        }
    }
    let mut names = vec!["load".to_string()];
    for c in 1..d {
        names.push(format!("covariate_{c}"));
    }
    TimeSeriesDataset::new(values, (0..t as i64).collect(), TimestampKind::Index, names, 0)
}

// --- delimited-text files ----------------------------------------------------

fn sniff_delimiter(path: &Path) -> Result<u8> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let first = content
        .lines()
        .find(|l| !l.trim_start().starts_with('#'))
        .unwrap_or("");
    Ok(if first.contains('\t') { b'\t' } else { b',' })
}

/// Parse a delimited table with a header row; column 0 is the timestamp.
pub fn load_series(path: &Path, target_index: usize) -> Result<TimeSeriesDataset> {
    if !path.exists() {
        return Err(Error::Data(format!("dataset file {} does not exist", path.display())));
    }
    let delim = sniff_delimiter(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("bad header in {}: {e}", path.display())))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Data("table needs a timestamp column and at least one feature".into()));
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let d = feature_names.len();
    let mut timestamps = Vec::new();
    let mut ts_kind = TimestampKind::Index;
    let mut rows: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("bad record at row {r}: {e}")))?;
        if record.len() != d + 1 {
            return Err(Error::Data(format!(
                "row {r} has {} cells, expected {}",
                record.len(),
                d + 1
            )));
        }
        let (ts, kind) = TimestampKind::parse(&record[0])?;
        if r == 0 {
            ts_kind = kind;
        }
        timestamps.push(ts);
        for (c, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Data(format!("unparseable cell at ({r},{c})")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value at ({r},{c})")));
            }
            rows.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data("empty table".into()));
    }
    let values = Array2::from_shape_vec((timestamps.len(), d), rows)
        .map_err(|e| Error::Shape(e.to_string()))?;
    TimeSeriesDataset::new(values, timestamps, ts_kind, feature_names, target_index)
}

/// Write a dataset as a tab-delimited table.
pub fn save_dataset(path: &Path, ds: &TimeSeriesDataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    write!(w, "timestamp").map_err(io)?;
    for name in &ds.feature_names {
        write!(w, "\t{name}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (r, ts) in ds.timestamps.iter().enumerate() {
        write!(w, "{}", ds.ts_kind.format(*ts)).map_err(io)?;
        for c in 0..ds.d() {
            write!(w, "\t{}", ds.values[[r, c]]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    Ok(())
}

fn read_two_column_file(path: &Path) -> Result<Vec<(String, f64)>> {
    if !path.exists() {
        return Err(Error::Data(format!("file {} does not exist", path.display())));
    }
    let delim = sniff_delimiter(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("bad record at row {r}: {e}")))?;
        if record.len() < 2 {
            return Err(Error::Data(format!("row {r} needs (timestamp, value)")));
        }
        let v: f64 = record[1]
            .parse()
            .map_err(|_| Error::Data(format!("unparseable value at row {r}")))?;
        out.push((record[0].to_string(), v));
    }
    Ok(out)
}

/// Export an imputation: one (timestamp, value) row per masked position.
pub fn save_imputation(path: &Path, ss: &SampleSet, imp: &ImputationSet) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(w, "# source={}", imp.source_name).map_err(io)?;
    writeln!(w, "timestamp\tvalue").map_err(io)?;
    for (p, m) in imp.mask.source_mask.iter().enumerate() {
        if *m {
            writeln!(
                w,
                "{}\t{}",
                ss.ts_kind.format(ss.source_timestamps[p]),
                imp.source_series[p]
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

/// Export a mask: one (timestamp, 0/1) row per source position.
pub fn save_mask(path: &Path, ss: &SampleSet, mask: &MaskSet) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(w, "timestamp\tmasked").map_err(io)?;
    for (p, m) in mask.source_mask.iter().enumerate() {
        writeln!(w, "{}\t{}", ss.ts_kind.format(ss.source_timestamps[p]), u8::from(*m)).map_err(io)?;
    }
    Ok(())
}

/// Load a mask exported by [`save_mask`] and re-window it for `ss`.
pub fn load_mask(path: &Path, ss: &SampleSet) -> Result<MaskSet> {
    let rows = read_two_column_file(path)?;
    if rows.len() != ss.t_total() {
        return Err(Error::Data(format!(
            "mask file {} has {} rows but the split has {} source rows",
            path.display(),
            rows.len(),
            ss.t_total()
        )));
    }
    let mut source_mask = vec![false; ss.t_total()];
    for (p, (ts_str, flag)) in rows.iter().enumerate() {
        let (ts, _) = TimestampKind::parse(ts_str)?;
        if ts != ss.source_timestamps[p] {
            return Err(Error::Data(format!(
                "mask file timestamp {ts_str} does not match series position {p}"
            )));
        }
        source_mask[p] = *flag != 0.0;
    }
    Ok(MaskSet::from_source(ss, source_mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn synthetic_samples(days: usize, l1: usize, l2: usize, stride: usize) -> SampleSet {
        let ds = generate_synthetic(days, 1, 5).unwrap();
        window(&ds, l1, l2, stride, SplitTag::Train).unwrap()
    }

    #[test]
    fn load_series_parses_small_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "a.csv", "t,x,y\n0,1.0,2.0\n1,1.5,2.5\n2,2.0,3.0\n");
        let ds = load_series(&path, 1).unwrap();
        assert_eq!(ds.t_total(), 3);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.target_index, 1);
        assert_eq!(ds.target_column().to_vec(), vec![2.0, 2.5, 3.0]);
    }

    #[test]
    fn load_series_rejects_nan_and_disorder() {
        let dir = tempfile::tempdir().unwrap();
        let bad = write_file(dir.path(), "nan.csv", "t,x\n0,1.0\n1,NaN\n");
        let err = load_series(&bad, 0).unwrap_err();
        assert!(err.to_string().contains("non-finite value at (1,0)"), "{err}");

        let unordered = write_file(dir.path(), "ord.csv", "t,x\n1,1.0\n0,2.0\n");
        assert!(load_series(&unordered, 0).is_err());

        let empty = write_file(dir.path(), "empty.csv", "t,x\n");
        assert!(load_series(&empty, 0).is_err());

        assert!(load_series(Path::new("/nonexistent/file.csv"), 0).is_err());
    }

    #[test]
    fn load_series_parses_datetime_and_year_of_hourly_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut content = String::from("t,load\n");
        let start = NaiveDateTime::parse_from_str("2011-01-01 00:00", "%Y-%m-%d %H:%M").unwrap();
        for h in 0..8760i64 {
            let ts = start + chrono::Duration::hours(h);
            content.push_str(&format!("{},{}\n", ts.format("%Y-%m-%d %H:%M"), h as f64 * 0.01));
        }
        let path = write_file(dir.path(), "year.csv", &content);
        let ds = load_series(&path, 0).unwrap();
        assert_eq!(ds.t_total(), 8760);
        assert_eq!(ds.d(), 1);
        assert!(matches!(ds.ts_kind, TimestampKind::DateTime(_)));
    }

    #[test]
    fn window_counts_match_enumeration() {
        // T=48, l1=l2=24, stride 1 -> exactly one window.
        let ds = generate_synthetic(2, 1, 0).unwrap();
        assert_eq!(ds.t_total(), 48);
        let ss = window(&ds, 24, 24, 1, SplitTag::Train).unwrap();
        assert_eq!(ss.n(), 1);

        // T=50: count by brute-force enumeration of valid start positions.
        let ds50 = TimeSeriesDataset::new(
            Array2::from_shape_fn((50, 1), |(r, _)| r as f64),
            (0..50).collect(),
            TimestampKind::Index,
            vec!["x".into()],
            0,
        )
        .unwrap();
        let enumerated = (0..50).filter(|i| i + 48 <= 50).count();
        let ss50 = window(&ds50, 24, 24, 1, SplitTag::Train).unwrap();
        assert_eq!(ss50.n(), enumerated);
        assert_eq!(ss50.n(), 3);

        // One year of hourly data at stride 1: 8760 training windows needs
        // T = 8760 + 47.
        let ds_year = TimeSeriesDataset::new(
            Array2::zeros((8760 + 47, 1)),
            (0..(8760 + 47) as i64).collect(),
            TimestampKind::Index,
            vec!["x".into()],
            0,
        )
        .unwrap();
        let ss_year = window(&ds_year, 24, 24, 1, SplitTag::Train).unwrap();
        assert_eq!(ss_year.n(), 8760);

        // Too short.
        let short = TimeSeriesDataset::new(
            Array2::zeros((40, 1)),
            (0..40).collect(),
            TimestampKind::Index,
            vec!["x".into()],
            0,
        )
        .unwrap();
        assert!(window(&short, 24, 24, 1, SplitTag::Train).is_err());
    }

    #[test]
    fn windowing_is_lossless_at_stride_l2() {
        let ds = generate_synthetic(10, 1, 3).unwrap();
        let ss = window(&ds, 24, 24, 24, SplitTag::Train).unwrap();
        let series = ss.source_target_series();
        let mut rebuilt = Vec::new();
        for i in 0..ss.n() {
            rebuilt.extend(ss.targets.row(i).iter().copied());
        }
        assert_eq!(&series[24..24 + rebuilt.len()], rebuilt.as_slice());
    }

    #[test]
    fn mask_rate_lands_in_the_stated_band() {
        // Span of ~1000 positions, rate 0.40: realized in [0.40, 0.40 + 120/1000].
        let ss = synthetic_samples(44, 24, 24, 24);
        assert!(ss.target_span().len() >= 1000);
        let spec = MaskSpec::default_protocol(3);
        let mask = generate_mask(&ss, &spec).unwrap();
        let slack = 120.0 / ss.target_span().len() as f64;
        assert!(mask.realized_rate >= 0.40 && mask.realized_rate <= 0.40 + slack,
            "realized {}", mask.realized_rate);

        // Window masks agree with the source mask index-for-index.
        for i in 0..ss.n() {
            for j in 0..ss.l2 {
                assert_eq!(mask.masks[[i, j]], mask.source_mask[ss.target_source_pos(i, j)]);
            }
        }
    }

    #[test]
    fn mask_determinism_and_limit_cases() {
        let ss = synthetic_samples(20, 24, 24, 24);
        let spec = MaskSpec { missing_rate: 0.40, run_lengths: vec![2, 4, 6, 12, 24], seed: 11 };
        let a = generate_mask(&ss, &spec).unwrap();
        let b = generate_mask(&ss, &spec).unwrap();
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.source_mask, b.source_mask);

        // Vanishing rate with run_lengths {2}: at most one (clipped) run.
        let tiny = MaskSpec { missing_rate: 1e-9, run_lengths: vec![2], seed: 7 };
        let m = generate_mask(&ss, &tiny).unwrap();
        let masked: usize = m.source_mask.iter().filter(|x| **x).count();
        assert_eq!(masked, 1);

        // Unreachable rate: run length far exceeding the series.
        let bad = MaskSpec { missing_rate: 0.4, run_lengths: vec![100_000], seed: 0 };
        assert!(generate_mask(&ss, &bad).is_err());
    }

    #[test]
    fn linear_imputation_midpoint_and_exactness() {
        // [1, _, 3] -> [1, 2, 3].
        let mut series = vec![1.0, 0.0, 3.0];
        linear_fill(&mut series, &[false, true, false]).unwrap();
        assert_eq!(series, vec![1.0, 2.0, 3.0]);

        // A globally linear series is reproduced exactly.
        let t = 200;
        let values = Array2::from_shape_fn((t, 1), |(r, _)| 0.5 * r as f64 - 3.0);
        let ds = TimeSeriesDataset::new(values, (0..t as i64).collect(), TimestampKind::Index, vec!["x".into()], 0).unwrap();
        let ss = window(&ds, 24, 24, 24, SplitTag::Train).unwrap();
        let spec = MaskSpec { missing_rate: 0.3, run_lengths: vec![2, 4, 6], seed: 5 };
        let mask = generate_mask(&ss, &spec).unwrap();
        let imp = impute(&ss, &mask, ImputeMethod::Linear).unwrap();
        for (p, v) in imp.source_series.iter().enumerate() {
            assert!((v - (0.5 * p as f64 - 3.0)).abs() < 1e-12, "pos {p}");
        }
    }

    #[test]
    fn mean_imputation_matches_brute_force_calendar_average() {
        let ss = synthetic_samples(30, 24, 24, 24);
        let spec = MaskSpec { missing_rate: 0.35, run_lengths: vec![2, 4, 6, 12], seed: 9 };
        let mask = generate_mask(&ss, &spec).unwrap();
        let imp = impute(&ss, &mask, ImputeMethod::Mean { period: 24 }).unwrap();
        let clean = ss.source_target_series();
        for p in 0..ss.t_total() {
            if mask.source_mask[p] {
                // Brute force: average observed values sharing p's hour.
                let hour = p % 24;
                let mut sum = 0.0;
                let mut cnt = 0usize;
                for (q, c) in clean.iter().enumerate() {
                    if q % 24 == hour && !mask.source_mask[q] {
                        sum += c;
                        cnt += 1;
                    }
                }
                assert!(cnt > 0);
                assert!((imp.source_series[p] - sum / cnt as f64).abs() < 1e-12);
            } else {
                // Observed positions unchanged bit-exactly.
                assert_eq!(imp.source_series[p], clean[p]);
            }
        }
        // Window labels equal ground truth exactly where unmasked.
        for i in 0..ss.n() {
            for j in 0..ss.l2 {
                if !mask.masks[[i, j]] {
                    assert_eq!(imp.labels[[i, j]], ss.targets[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn external_imputation_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ss = synthetic_samples(10, 24, 24, 24);
        let spec = MaskSpec { missing_rate: 0.3, run_lengths: vec![2, 4], seed: 21 };
        let mask = generate_mask(&ss, &spec).unwrap();

        // File equal to ground truth -> labels equal targets everywhere.
        let mut content = String::from("timestamp\tvalue\n");
        let clean = ss.source_target_series();
        for (p, m) in mask.source_mask.iter().enumerate() {
            if *m {
                content.push_str(&format!("{}\t{}\n", ss.source_timestamps[p], clean[p]));
            }
        }
        let path = write_file(dir.path(), "ext.tsv", &content);
        let imp = load_external_imputation(&path, &ss, &mask).unwrap();
        assert_eq!(imp.labels, ss.targets);
        assert!(imp.source_name.starts_with("external:"));

        // File missing one masked row -> alignment error.
        let mut lines: Vec<&str> = content.lines().collect();
        lines.remove(lines.len() - 1);
        let short = write_file(dir.path(), "short.tsv", &(lines.join("\n") + "\n"));
        let err = load_external_imputation(&short, &ss, &mask).unwrap_err();
        assert!(err.to_string().contains("missing masked timestamp"), "{err}");
    }

    #[test]
    fn imputation_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ss = synthetic_samples(12, 24, 24, 24);
        let spec = MaskSpec { missing_rate: 0.3, run_lengths: vec![2, 4, 6], seed: 2 };
        let mask = generate_mask(&ss, &spec).unwrap();
        let imp = impute(&ss, &mask, ImputeMethod::Mean { period: 24 }).unwrap();
        let path = dir.path().join("imp.tsv");
        save_imputation(&path, &ss, &imp).unwrap();
        let loaded = load_external_imputation(&path, &ss, &mask).unwrap();
        assert_eq!(imp.labels, loaded.labels);

        let mpath = dir.path().join("mask.tsv");
        save_mask(&mpath, &ss, &mask).unwrap();
        let mloaded = load_mask(&mpath, &ss).unwrap();
        assert_eq!(mask.masks, mloaded.masks);
        assert_eq!(mask.source_mask, mloaded.source_mask);
    }

    #[test]
    fn toy_noiseless_dense_beats_sparse_on_imputation() {
        let base = generate_synthetic(40, 1, 13).unwrap();
        let (case_i, case_ii) = simulate_toy(4, 0.0, 0.0, &base, 1).unwrap();
        let mse_i = series_mse(&case_i, &base).unwrap();
        let mse_ii = series_mse(&case_ii, &base).unwrap();
        assert!(mse_i < mse_ii, "noiseless: dense {mse_i} vs sparse {mse_ii}");
    }

    #[test]
    fn toy_is_deterministic() {
        let base = generate_synthetic(20, 1, 13).unwrap();
        let (a1, a2) = simulate_toy(4, 0.05, 0.3, &base, 9).unwrap();
        let (b1, b2) = simulate_toy(4, 0.05, 0.3, &base, 9).unwrap();
        assert_eq!(a1.values, b1.values);
        assert_eq!(a2.values, b2.values);
    }

    #[test]
    fn normalizer_zscores_with_train_stats() {
        let ds = generate_synthetic(30, 2, 3).unwrap();
        let (train, val, _test) = ds.split_fractions(0.6, 0.2).unwrap();
        let norm = Normalizer::fit(&train);
        let train_n = norm.apply(&train).unwrap();
        for c in 0..2 {
            let col = train_n.values.column(c);
            let m = col.sum() / col.len() as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
        // Validation uses the train stats, so its mean is near but not exactly 0.
        let val_n = norm.apply(&val).unwrap();
        assert!((val_n.values.column(0).sum().abs() / val.t_total() as f64) < 1.0);
    }

    #[test]
    fn with_imputed_inputs_replaces_target_channel_only() {
        let ds = generate_synthetic(10, 2, 4).unwrap();
        let ss = window(&ds, 24, 24, 24, SplitTag::Train).unwrap();
        let series = vec![0.0; ss.t_total()];
        let patched = ss.with_imputed_inputs(&series).unwrap();
        for (i, x) in patched.inputs.iter().enumerate() {
            for j in 0..ss.l1 {
                assert_eq!(x[[0, j]], 0.0);
                assert_eq!(x[[1, j]], ss.inputs[i][[1, j]]);
            }
        }
        assert_eq!(patched.targets, ss.targets);
    }
}
