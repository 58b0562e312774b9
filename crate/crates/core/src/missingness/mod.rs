//! Mask generators: MCAR, the score-and-quantile gate (with optional
//! mask-to-mask propagation), and the logistic MNAR benchmark mechanism.

mod gate;
mod mnar;
mod probe;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use gate::{alpha_max, quantile_threshold, score_quantile_gate, GateConfig, ScoreGate};
pub use mnar::{input_column_count, mnar_logistic_m2m, MnarConfig};
pub use probe::{mask_dependence_probe, DependenceReport, PairDependence, MIN_PROBE_DRAWS};

/// Where a mask came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mechanism: String,
    pub seed: u64,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// `n × d` missingness indicators, `1` = missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    n: usize,
    d: usize,
    bits: Vec<u8>,
    pub provenance: Provenance,
}

impl Mask {
    pub fn zeros(n: usize, d: usize, mechanism: &str, seed: u64) -> Self {
        Self {
            n,
            d,
            bits: vec![0; n * d],
            provenance: Provenance {
                mechanism: mechanism.to_string(),
                seed,
                params: serde_json::Value::Null,
            },
        }
    }

    pub fn from_bits(n: usize, d: usize, bits: Vec<u8>, provenance: Provenance) -> Result<Self> {
        if bits.len() != n * d || bits.iter().any(|&b| b > 1) {
            return Err(Error::dim("mask", format!("{} bits for {n}×{d}", bits.len())));
        }
        Ok(Self { n, d, bits, provenance })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.d + j] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, missing: bool) {
        self.bits[i * self.d + j] = u8::from(missing);
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.d..(i + 1) * self.d]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn rate(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn column_count(&self, j: usize) -> usize {
        (0..self.n).filter(|&i| self.is_missing(i, j)).count()
    }

    pub fn column_rate(&self, j: usize) -> f64 {
        self.column_count(j) as f64 / self.n.max(1) as f64
    }

    pub fn force_observed(&mut self, cols: &[usize]) {
        for &j in cols {
            for i in 0..self.n {
                self.set(i, j, false);
            }
        }
    }

    /// Keeps the rows listed in `idx`.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut bits = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            bits.extend_from_slice(self.row(i));
        }
        Self {
            n: idx.len(),
            d: self.d,
            bits,
            provenance: self.provenance.clone(),
        }
    }
}

pub(crate) fn check_label_cols(d: usize, label_cols: &[usize]) -> Result<()> {
    match label_cols.iter().find(|&&c| c >= d) {
        Some(c) => Err(Error::Config(format!("label column {c} out of range for {d} columns"))),
        None => Ok(()),
    }
}

/// Independent Bernoulli(`p`) indicators on every non-label entry.
pub fn mcar_mask(n: usize, d: usize, p: f64, seed: u64, label_cols: &[usize]) -> Result<Mask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("MCAR rate {p} outside [0, 1]")));
    }
    check_label_cols(d, label_cols)?;
    let mut rng = seed::rng(seed);
    let mut mask = Mask::zeros(n, d, "mcar", seed);
    mask.provenance.params = serde_json::json!({ "rate": p });
    for i in 0..n {
        for j in 0..d {
            let draw = rng.random::<f64>() < p;
            mask.set(i, j, draw && !label_cols.contains(&j));
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mcar_extremes() {
        let m = mcar_mask(20, 5, 0.0, 1, &[]).unwrap();
        assert_eq!(m.count(), 0);
        let m = mcar_mask(20, 5, 1.0, 1, &[2]).unwrap();
        assert_eq!(m.count(), 20 * 4);
        assert_eq!(m.column_count(2), 0);
    }

    #[test]
    fn mcar_rate_concentrates() {
        // n·d = 10 000; binomial sd ≈ 0.0046, so ±0.01 is > 2 sd.
        let m = mcar_mask(1000, 10, 0.3, 17, &[]).unwrap();
        assert!((m.rate() - 0.3).abs() <= 0.01, "rate {}", m.rate());
    }

    #[test]
    fn mcar_rejects_bad_rate() {
        assert!(mcar_mask(3, 3, 1.5, 0, &[]).is_err());
        assert!(mcar_mask(3, 3, 0.5, 0, &[3]).is_err());
    }
}
