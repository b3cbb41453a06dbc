//! Shared desk-scale problem builders for tests.

use ndarray::Array2;

use crate::dataio::{
    generate_mask, generate_synthetic, impute, window, ImputationSet, ImputeMethod, MaskSet,
    MaskSpec, Normalizer, SampleSet, SplitTag, TimestampKind,
};

pub struct Fixture {
    pub train: SampleSet,
    pub validation: SampleSet,
    pub test: SampleSet,
    pub mask: MaskSet,
    pub y_mean: ImputationSet,
    pub y_linear: ImputationSet,
}

/// Synthetic hourly problem: z-scored splits, tiled 24/24 windows, block
/// mask on the training labels, mean and linear imputations, and training
/// inputs rebuilt from the mean-imputed series.
pub fn masked_problem(days: usize, seed: u64) -> Fixture {
    masked_problem_with(days, seed, 24, 0.40, &[2, 4, 6, 12, 24])
}

pub fn masked_problem_with(
    days: usize,
    seed: u64,
    stride: usize,
    rate: f64,
    run_lengths: &[usize],
) -> Fixture {
    let ds = generate_synthetic(days, 1, seed).unwrap();
    let (tr, va, te) = ds.split_fractions(0.6, 0.2).unwrap();
    let norm = Normalizer::fit(&tr);
    let tr = norm.apply(&tr).unwrap();
    let va = norm.apply(&va).unwrap();
    let te = norm.apply(&te).unwrap();
    let train_raw = window(&tr, 24, 24, stride, SplitTag::Train).unwrap();
    let validation = window(&va, 24, 24, stride, SplitTag::Validation).unwrap();
    let test = window(&te, 24, 24, stride, SplitTag::Test).unwrap();
    let spec = MaskSpec {
        missing_rate: rate,
        run_lengths: run_lengths.to_vec(),
        seed: crate::seeds::substream(seed, "mask"),
    };
    let mask = generate_mask(&train_raw, &spec).unwrap();
    let y_mean = impute(&train_raw, &mask, ImputeMethod::Mean { period: 24 }).unwrap();
    let y_linear = impute(&train_raw, &mask, ImputeMethod::Linear).unwrap();
    let train = train_raw.with_imputed_inputs(&y_mean.source_series).unwrap();
    Fixture { train, validation, test, mask, y_mean, y_linear }
}

/// Hand-buildable sample set over explicit input/target rows, for closed
/// form cases. stride is chosen so the target span fits the source length.
pub fn handmade_samples(inputs: Vec<Array2<f64>>, targets: Array2<f64>, l1: usize, l2: usize) -> SampleSet {
    let n = inputs.len();
    let d = inputs[0].nrows();
    let stride = l2;
    let t = l1 + (n - 1) * stride + l2;
    SampleSet {
        inputs,
        targets,
        split_tag: SplitTag::Train,
        l1,
        l2,
        stride,
        source_values: Array2::zeros((t, d)),
        source_timestamps: (0..t as i64).collect(),
        ts_kind: TimestampKind::Index,
        target_index: 0,
    }
}
