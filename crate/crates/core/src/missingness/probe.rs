//! Pairwise dependence probe over repeated mask draws.
//!
//! Indicators are centred per row across draws, which removes any row-level
//! effect shared by all draws (for the gate, the fixed latent `z`). What
//! remains correlated between two columns is dependence between indicators
//! given the row. A permutation test shuffles the draw index of one column,
//! keeping the row structure intact.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, Result};
use crate::seed;

pub const MIN_PROBE_DRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDependence {
    pub a: usize,
    pub b: usize,
    pub correlation: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub draws: usize,
    /// Pooled observations per pair (`draws × rows`).
    pub observations: usize,
    pub permutations: usize,
    pub pairs: Vec<PairDependence>,
}

impl DependenceReport {
    pub fn min_p_value(&self) -> Option<f64> {
        self.pairs.iter().map(|p| p.p_value).min_by(f64::total_cmp)
    }

    pub fn max_abs_correlation(&self) -> f64 {
        self.pairs.iter().map(|p| p.correlation.abs()).fold(0.0, f64::max)
    }
}

/// `[column][row][draw]` indicators centred per (column, row).
fn centred(masks: &[Mask]) -> Vec<Vec<Vec<f64>>> {
    let (n, d, r) = (masks[0].rows(), masks[0].cols(), masks.len());
    (0..d)
        .map(|j| {
            (0..n)
                .map(|i| {
                    let v: Vec<f64> = masks.iter().map(|m| f64::from(m.row(i)[j])).collect();
                    let mean = v.iter().sum::<f64>() / r as f64;
                    v.into_iter().map(|x| x - mean).collect()
                })
                .collect()
        })
        .collect()
}

fn pooled_corr(a: &[Vec<f64>], b: &[Vec<f64>], perm: Option<&[usize]>) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (ra, rb) in a.iter().zip(b) {
        for (t, &x) in ra.iter().enumerate() {
            let y = rb[perm.map_or(t, |p| p[t])];
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Probes every column pair of `masks` (all draws of one mechanism, same shape).
pub fn mask_dependence_probe(masks: &[Mask], permutations: usize, seed: u64) -> Result<DependenceReport> {
    if masks.len() < MIN_PROBE_DRAWS {
        return Err(Error::Contract(format!(
            "dependence probe needs at least {MIN_PROBE_DRAWS} draws, got {}",
            masks.len()
        )));
    }
    let (n, d) = (masks[0].rows(), masks[0].cols());
    if masks.iter().any(|m| m.rows() != n || m.cols() != d) {
        return Err(Error::dim("mask_dependence_probe", "draws differ in shape"));
    }
    let r = masks.len();
    let mut report = DependenceReport {
        draws: r,
        observations: r * n,
        permutations,
        pairs: Vec::new(),
    };
    if d < 2 {
        return Ok(report);
    }
    let c = centred(masks);
    let mut rng = seed::rng(seed);
    let mut perm: Vec<usize> = (0..r).collect();
    for a in 0..d {
        for b in a + 1..d {
            let obs = pooled_corr(&c[a], &c[b], None);
            let mut extreme = 0usize;
            for _ in 0..permutations {
                perm.shuffle(&mut rng);
                if pooled_corr(&c[a], &c[b], Some(&perm)).abs() >= obs.abs() {
                    extreme += 1;
                }
            }
            report.pairs.push(PairDependence {
                a,
                b,
                correlation: obs,
                p_value: (1 + extreme) as f64 / (1 + permutations) as f64,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missingness::{mcar_mask, Provenance};

    #[test]
    fn mcar_pairs_are_uncorrelated() {
        let masks: Vec<Mask> = (0..MIN_PROBE_DRAWS as u64).map(|s| mcar_mask(8, 4, 0.3, s, &[]).unwrap()).collect();
        let rep = mask_dependence_probe(&masks, 0, 1).unwrap();
        assert_eq!(rep.pairs.len(), 6);
        let bound = 3.0 / (rep.observations as f64).sqrt();
        assert!(rep.max_abs_correlation() <= bound, "{} > {bound}", rep.max_abs_correlation());
    }

    #[test]
    fn copied_column_is_detected() {
        let masks: Vec<Mask> = (0..MIN_PROBE_DRAWS as u64)
            .map(|s| {
                let base = mcar_mask(5, 2, 0.4, s, &[]).unwrap();
                let mut bits = base.bits().to_vec();
                for i in 0..5 {
                    bits[i * 2 + 1] = bits[i * 2];
                }
                Mask::from_bits(5, 2, bits, base.provenance.clone()).unwrap()
            })
            .collect();
        let rep = mask_dependence_probe(&masks, 99, 3).unwrap();
        assert!((rep.pairs[0].correlation - 1.0).abs() < 1e-12);
        assert!(rep.pairs[0].p_value <= 0.01);
    }

    #[test]
    fn single_column_gives_empty_report() {
        let masks: Vec<Mask> = (0..MIN_PROBE_DRAWS as u64).map(|s| mcar_mask(3, 1, 0.5, s, &[]).unwrap()).collect();
        assert!(mask_dependence_probe(&masks, 10, 0).unwrap().pairs.is_empty());
    }

    #[test]
    fn too_few_draws_is_rejected() {
        let prov = Provenance {
            mechanism: "x".into(),
            seed: 0,
            params: serde_json::Value::Null,
        };
        let masks = vec![Mask::from_bits(1, 2, vec![0, 1], prov).unwrap(); 10];
        assert!(mask_dependence_probe(&masks, 10, 0).is_err());
    }
}
