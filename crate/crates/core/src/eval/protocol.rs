//! Repeated-mask MNAR evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baselines::{restrict_mask, Imputer};
use super::dataset::MaskedDataset;
use super::metrics::{mean_std, oos_mae, ColumnScale};
use crate::error::{Error, Result};
use crate::missingness::{mnar_logistic_m2m, Mask, MnarConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub masks: usize,
    pub rate: f64,
    /// Mask `k` is drawn with seed `seed + k`.
    pub seed: u64,
    pub split_ratio: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            masks: 10,
            rate: 0.3,
            seed: 0,
            split_ratio: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRun {
    pub mask_seed: u64,
    pub masked_entries: usize,
    pub score: Option<f64>,
    pub error: Option<String>,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub dataset: String,
    pub method: String,
    pub runs: Vec<MaskRun>,
}

impl ProtocolResult {
    pub fn scores(&self) -> Vec<Option<f64>> {
        self.runs.iter().map(|r| r.score).collect()
    }

    /// Mean and std over the masks that were scored.
    pub fn summary(&self) -> Option<(f64, f64)> {
        let s: Vec<f64> = self.runs.iter().filter_map(|r| r.score).collect();
        (!s.is_empty()).then(|| mean_std(&s))
    }
}

/// The `K` MNAR masks of the protocol, each drawn on the test rows only and
/// embedded in a full-size mask.
pub fn protocol_masks(ds: &MaskedDataset, cfg: &ProtocolConfig) -> Result<Vec<Mask>> {
    if ds.test.is_empty() || ds.train.is_empty() {
        return Err(Error::Contract("protocol needs a train/test split".into()));
    }
    if ds.test.iter().any(|&i| ds.mask.row(i).contains(&1)) {
        return Err(Error::Contract("test rows need ground truth at every entry".into()));
    }
    let test = ds.select_rows(&ds.test);
    let mnar = MnarConfig::with_rate(cfg.rate);
    (0..cfg.masks as u64)
        .map(|k| {
            let local = mnar_logistic_m2m(&test.x, &mnar, cfg.seed + k, &[])?;
            let mut full = Mask::zeros(ds.n_rows(), ds.n_cols(), &local.provenance.mechanism, cfg.seed + k);
            full.provenance = local.provenance.clone();
            for (r, &i) in ds.test.iter().enumerate() {
                for j in 0..ds.n_cols() {
                    full.set(i, j, local.is_missing(r, j));
                }
            }
            Ok(full)
        })
        .collect()
}

/// Masks the test split `K` times, imputes, and scores out-of-sample MAE on
/// the newly masked test entries (columns scaled by train statistics). A
/// failing method leaves an empty cell with the error recorded.
pub fn run_mnar_protocol(ds: &MaskedDataset, cfg: &ProtocolConfig, method: &dyn Imputer) -> Result<ProtocolResult> {
    let masks = protocol_masks(ds, cfg)?;
    let scale = ColumnScale::from_rows(ds, &ds.train);
    let runs: Vec<MaskRun> = masks
        .par_iter()
        .map(|m| {
            let seed = m.provenance.seed;
            let masked_entries = m.count();
            let attempt = ds.with_mask(m).and_then(|masked| method.impute(&masked, seed)).and_then(|imp| {
                let test_mask = restrict_mask(m, &ds.test);
                oos_mae(&imp.values, &ds.x, &test_mask, &ds.test, &scale).map(|s| (s, imp.flags))
            });
            match attempt {
                Ok((s, flags)) => MaskRun {
                    mask_seed: seed,
                    masked_entries,
                    score: Some(s),
                    error: None,
                    flags,
                },
                Err(e) => MaskRun {
                    mask_seed: seed,
                    masked_entries,
                    score: None,
                    error: Some(e.to_string()),
                    flags: Vec::new(),
                },
            }
        })
        .collect();
    Ok(ProtocolResult {
        dataset: ds.name.clone(),
        method: method.name(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::baselines::{ConstantImputer, OracleImputer};
    use crate::eval::dataset::{split_dataset, ColumnMeta};
    use crate::seed;
    use crate::tensor::Tensor;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, s: u64) -> MaskedDataset {
        let mut rng = seed::rng(s);
        let x: Vec<f64> = (0..n * d).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let cols = (0..d).map(|j| ColumnMeta::numeric(format!("c{j}"))).collect();
        let mut ds = MaskedDataset::from_values("g", Tensor::new(vec![n, d], x).unwrap(), cols).unwrap();
        let (tr, te) = split_dataset(n, 0.7, s, None).unwrap();
        ds.train = tr;
        ds.test = te;
        ds
    }

    #[test]
    fn oracle_scores_zero_on_every_mask() {
        let ds = gaussian(200, 6, 1);
        let r = run_mnar_protocol(&ds, &ProtocolConfig::default(), &OracleImputer { truth: ds.x.clone() }).unwrap();
        assert_eq!(r.runs.len(), 10);
        assert!(r.runs.iter().all(|m| m.score == Some(0.0)));
        let seeds: Vec<u64> = r.runs.iter().map(|m| m.mask_seed).collect();
        assert_eq!(seeds, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_fill_scores_mean_absolute_value() {
        let ds = gaussian(150, 5, 2);
        let cfg = ProtocolConfig { masks: 3, ..Default::default() };
        let scale = ColumnScale::from_rows(&ds, &ds.train);
        let masks = protocol_masks(&ds, &cfg).unwrap();
        let r = run_mnar_protocol(&ds, &cfg, &ConstantImputer(0.0)).unwrap();
        for (m, run) in masks.iter().zip(&r.runs) {
            let (mut tot, mut cnt) = (0.0, 0);
            for &i in &ds.test {
                for j in 0..5 {
                    if m.is_missing(i, j) {
                        tot += ds.x.at(i, j).abs() / scale.scale[j];
                        cnt += 1;
                    }
                }
            }
            assert!((run.score.unwrap() - tot / cnt as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_only_touch_test_rows() {
        let ds = gaussian(100, 4, 3);
        for m in protocol_masks(&ds, &ProtocolConfig::default()).unwrap() {
            assert!(ds.train.iter().all(|&i| !m.row(i).contains(&1)));
            assert!(m.count() > 0);
        }
    }

    #[test]
    fn failures_leave_empty_cells() {
        struct Broken;
        impl Imputer for Broken {
            fn name(&self) -> String {
                "broken".into()
            }
            fn impute(&self, _: &MaskedDataset, _: u64) -> Result<super::super::baselines::Imputed> {
                Err(Error::Contract("nope".into()))
            }
        }
        let ds = gaussian(60, 4, 4);
        let r = run_mnar_protocol(&ds, &ProtocolConfig { masks: 2, ..Default::default() }, &Broken).unwrap();
        assert!(r.runs.iter().all(|m| m.score.is_none() && m.error.is_some()));
        assert!(r.summary().is_none());
    }
}
