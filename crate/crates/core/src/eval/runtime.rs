//! Wall-clock timing of imputation methods on a fixed-size input.

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::baselines::Imputer;
use super::dataset::{split_dataset, ColumnMeta, MaskedDataset};
use super::metrics::mean_std;
use crate::error::Result;
use crate::missingness::mcar_mask;
use crate::seed;
use crate::tensor::Tensor;

pub const RUNTIME_ROWS: usize = 1000;
pub const RUNTIME_COLS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRecord {
    pub method: String,
    pub rows: usize,
    pub cols: usize,
    /// Seconds per repeat.
    pub timings: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Standard-normal table with an MCAR mask at `rate`, split 70/30.
pub fn runtime_fixture(rows: usize, cols: usize, rate: f64, seed: u64) -> Result<MaskedDataset> {
    let mut rng = seed::stream(seed, &[seed::TAG_DATA]);
    let x: Vec<f64> = (0..rows * cols).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let columns = (0..cols).map(|j| ColumnMeta::numeric(format!("x{j}"))).collect();
    let full = MaskedDataset::from_values("runtime", Tensor::new(vec![rows, cols], x)?, columns)?;
    let mask = mcar_mask(rows, cols, rate, seed::derive(seed, &[seed::TAG_MECHANISM]), &[])?;
    let mut ds = full.with_mask(&mask)?;
    let (train, test) = split_dataset(rows, 0.7, seed, None)?;
    ds.train = train;
    ds.test = test;
    Ok(ds)
}

/// Times `repeats` end-to-end imputations of `ds`.
pub fn bench_runtime(method: &dyn Imputer, ds: &MaskedDataset, repeats: usize, seed: u64) -> Result<RuntimeRecord> {
    let mut timings = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let t0 = Instant::now();
        let out = method.impute(ds, seed::derive(seed, &[r as u64]))?;
        timings.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let (mean, std) = if timings.is_empty() { (0.0, 0.0) } else { mean_std(&timings) };
    Ok(RuntimeRecord {
        method: method.name(),
        rows: ds.n_rows(),
        cols: ds.n_cols(),
        timings,
        mean,
        std,
    })
}
