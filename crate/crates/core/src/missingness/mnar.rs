//! Logistic MNAR benchmark mechanism with mask-to-mask propagation.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_label_cols, Mask};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

const BRACKET: (f64, f64) = (-50.0, 50.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnarConfig {
    pub rate: f64,
    /// Tolerance on the mean predicted rate.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for MnarConfig {
    fn default() -> Self {
        Self {
            rate: 0.3,
            tolerance: 1e-3,
            max_iters: 100,
        }
    }
}

impl MnarConfig {
    pub fn with_rate(rate: f64) -> Self {
        Self { rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("MNAR rate {} outside (0, 1)", self.rate)));
        }
        if !(self.tolerance > 0.0) || self.max_iters == 0 {
            return Err(Error::Config("bisection needs positive tolerance and iterations".into()));
        }
        Ok(())
    }
}

/// `max(⌊q·d⌋, 1)` with `q = 0.3` for `p ≤ 0.3`, else `0.1`.
pub fn input_column_count(d: usize, p: f64) -> usize {
    let q = if p <= 0.3 { 0.3 } else { 0.1 };
    ((q * d as f64).floor() as usize).max(1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_rate(base: &[f64], b: f64) -> f64 {
    base.iter().map(|&a| sigmoid(a + b)).sum::<f64>() / base.len() as f64
}

/// Finds `b` with `|mean σ(a_i + b) − p| ≤ tol` on the bracket `[-50, 50]`.
pub(crate) fn calibrate_bias(base: &[f64], p: f64, tol: f64, max_iters: usize) -> Result<f64> {
    let (mut lo, mut hi) = BRACKET;
    let fail = |lo: f64, hi: f64, iters: usize| Error::Bisection {
        tol,
        iters,
        lo,
        hi,
        rate: mean_rate(base, 0.5 * (lo + hi)),
        target: p,
    };
    if mean_rate(base, lo) > p + tol || mean_rate(base, hi) < p - tol {
        return Err(fail(lo, hi, 0));
    }
    for _ in 0..max_iters {
        let mid = 0.5 * (lo + hi);
        let r = mean_rate(base, mid);
        if (r - p).abs() <= tol {
            return Ok(mid);
        }
        if r < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(fail(lo, hi, max_iters))
}

fn standardize(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    if !x.is_finite() {
        return Err(Error::NonFinite("MNAR input must be fully observed and finite".into()));
    }
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.at(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            out.set(i, j, (x.at(i, j) - mean) / sd);
        }
    }
    Ok(out)
}

/// Masks `x` under the logistic MNAR mechanism. Label columns are excluded
/// from both the input set and the target set and stay observed.
pub fn mnar_logistic_m2m(x: &Tensor<f64>, cfg: &MnarConfig, seed: u64, label_cols: &[usize]) -> Result<Mask> {
    cfg.validate()?;
    let (n, d) = (x.rows(), x.cols());
    check_label_cols(d, label_cols)?;
    if n == 0 {
        return Err(Error::Contract("MNAR mask needs at least one row".into()));
    }
    let free: Vec<usize> = (0..d).filter(|j| !label_cols.contains(j)).collect();
    if free.len() < 2 {
        return Err(Error::Contract(format!("MNAR mask needs at least 2 maskable columns, got {}", free.len())));
    }
    let d_in = input_column_count(free.len(), cfg.rate);
    if d_in > free.len() - 1 {
        return Err(Error::Config(format!("{d_in} input columns leave no target among {}", free.len())));
    }
    let xs = standardize(x)?;
    let mut rng = seed::rng(seed);
    let mut inputs: Vec<usize> = sample(&mut rng, free.len(), d_in).into_iter().map(|k| free[k]).collect();
    inputs.sort_unstable();
    let targets: Vec<usize> = free.iter().copied().filter(|j| !inputs.contains(j)).collect();

    let mut mask = Mask::zeros(n, d, "mnar-logistic-m2m", seed);
    for i in 0..n {
        for &s in &inputs {
            mask.set(i, s, rng.random::<f64>() < cfg.rate);
        }
    }

    let mut biases = Vec::with_capacity(targets.len());
    for &j in &targets {
        let w: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
        let base: Vec<f64> = (0..n)
            .map(|i| {
                inputs
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| {
                        let m = f64::from(mask.row(i)[s]);
                        xs.at(i, s) * m * w[k] + (1.0 - m) * v[k]
                    })
                    .sum()
            })
            .collect();
        let b = calibrate_bias(&base, cfg.rate, cfg.tolerance, cfg.max_iters)?;
        for (i, a) in base.iter().enumerate() {
            mask.set(i, j, rng.random::<f64>() < sigmoid(a + b));
        }
        biases.push(b);
    }
    mask.provenance.params = serde_json::json!({
        "rate": cfg.rate,
        "inputs": inputs,
        "targets": targets,
        "biases": biases,
    });
    Ok(mask)
}
