//! Imputation and classification metrics and rank aggregation.

use serde::{Deserialize, Serialize};

use super::dataset::MaskedDataset;
use crate::error::{Error, Result};
use crate::missingness::Mask;
use crate::tensor::Tensor;

/// Per-column location and scale used to put MAE on a common footing, and
/// the level count of categorical columns (imputations are rounded to a
/// valid level before scoring).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub levels: Vec<Option<usize>>,
}

impl ColumnScale {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            levels: vec![None; d],
        }
    }

    /// Mean and population standard deviation of the observed entries of
    /// `rows`. Columns with no spread (or no observations) get scale 1.
    pub fn from_rows(ds: &MaskedDataset, rows: &[usize]) -> Self {
        let d = ds.n_cols();
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|&&i| !ds.mask.is_missing(i, j))
                .map(|&i| ds.x.at(i, j))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            mean[j] = m;
            if var.sqrt() > 1e-12 {
                scale[j] = var.sqrt();
            }
        }
        Self {
            mean,
            scale,
            levels: ds.columns.iter().map(|c| c.n_levels()).collect(),
        }
    }
}

fn round_level(v: f64, k: usize) -> f64 {
    v.round().clamp(0.0, k.saturating_sub(1) as f64)
}

/// Mean absolute error over entries of `rows` that are missing in `mask`,
/// each divided by its column scale.
pub fn oos_mae(imputed: &Tensor<f64>, truth: &Tensor<f64>, mask: &Mask, rows: &[usize], scale: &ColumnScale) -> Result<f64> {
    if imputed.shape() != truth.shape() || mask.rows() != truth.rows() || mask.cols() != truth.cols() {
        return Err(Error::dim("oos_mae", format!("imputed {:?}, truth {:?}", imputed.shape(), truth.shape())));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for &i in rows {
        for j in 0..truth.cols() {
            if mask.is_missing(i, j) {
                let mut v = imputed.at(i, j);
                if let Some(k) = scale.levels[j] {
                    v = round_level(v, k);
                }
                total += (v - truth.at(i, j)).abs() / scale.scale[j];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Contract("no masked entries to score".into()));
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("imputation error".into()));
    }
    Ok(total / count as f64)
}

/// Midranks (1-based), ties averaged.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && values[idx[e + 1]] == values[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Binary AUC by the Mann-Whitney rank statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", "scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("AUC needs both classes present".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Macro one-vs-rest AUC over the classes that occur in `labels`; the
/// binary case reduces to the AUC of the class-1 column.
pub fn auc_ovr(probs: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::dim("auc_ovr", "probability rows differ from label count"));
    }
    let c = probs.cols();
    if labels.iter().any(|&y| y >= c) {
        return Err(Error::Contract("label outside the probability columns".into()));
    }
    let present: Vec<usize> = (0..c).filter(|&k| labels.contains(&k)).collect();
    if present.len() < 2 {
        return Err(Error::Contract("AUC needs at least two classes present".into()));
    }
    if c == 2 {
        let s: Vec<f64> = (0..probs.rows()).map(|i| probs.at(i, 1)).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return auc(&s, &l);
    }
    let mut total = 0.0;
    for &k in &present {
        let s: Vec<f64> = (0..probs.rows()).map(|i| probs.at(i, k)).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        total += auc(&s, &l)?;
    }
    Ok(total / present.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    /// Mean rank per method over the datasets where it has a value.
    pub ranks: Vec<f64>,
    /// Set when some cell was missing and was left out of its dataset's
    /// ranking.
    pub incomplete: bool,
}

/// Ranks methods within each dataset (`table[method][dataset]`), averaging
/// ties, then averages over datasets. Missing cells drop out of their
/// dataset's ranking.
pub fn avg_rank(table: &[Vec<Option<f64>>], direction: Direction) -> Result<RankSummary> {
    let m = table.len();
    let nd = table.first().map_or(0, Vec::len);
    if table.iter().any(|r| r.len() != nd) {
        return Err(Error::dim("avg_rank", "ragged metric table"));
    }
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    let mut incomplete = false;
    for dcol in 0..nd {
        let present: Vec<usize> = (0..m).filter(|&k| table[k][dcol].is_some_and(|v| !v.is_nan())).collect();
        incomplete |= present.len() < m;
        let vals: Vec<f64> = present
            .iter()
            .map(|&k| {
                let v = table[k][dcol].expect("present");
                match direction {
                    Direction::LowerIsBetter => v,
                    Direction::HigherIsBetter => -v,
                }
            })
            .collect();
        for (&k, r) in present.iter().zip(average_ranks(&vals)) {
            sums[k] += r;
            counts[k] += 1;
        }
    }
    let ranks = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    Ok(RankSummary { ranks, incomplete })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dataset::ColumnMeta;
    use proptest::prelude::*;

    /// Counts concordant pairs directly.
    fn auc_pairs(s: &[f64], l: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_fixtures() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(auc(&s, &l).unwrap(), auc_pairs(&s, &l));
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(v in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let s: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let l: Vec<bool> = v.iter().map(|p| p.1).collect();
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            prop_assert!((auc(&s, &l).unwrap() - auc_pairs(&s, &l)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|x| (x * 0.3).exp()).collect();
            prop_assert!((auc(&t, &l).unwrap() - auc(&s, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ranks_invariant_to_monotone_transform(t in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 3)) {
            let table: Vec<Vec<Option<f64>>> = t.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
            let warped: Vec<Vec<Option<f64>>> = t.iter().map(|r| r.iter().map(|&v| Some(v.powi(3) + 2.0 * v)).collect()).collect();
            prop_assert_eq!(
                avg_rank(&table, Direction::LowerIsBetter).unwrap(),
                avg_rank(&warped, Direction::LowerIsBetter).unwrap()
            );
        }
    }

    #[test]
    fn multiclass_auc_is_macro_average() {
        let p = Tensor::new(vec![4, 3], vec![0.7, 0.2, 0.1, 0.2, 0.6, 0.2, 0.1, 0.3, 0.6, 0.5, 0.4, 0.1]).unwrap();
        let y = [0, 1, 2, 1];
        let per: Vec<f64> = (0..3)
            .map(|k| {
                let s: Vec<f64> = (0..4).map(|i| p.at(i, k)).collect();
                let l: Vec<bool> = y.iter().map(|&v| v == k).collect();
                auc_pairs(&s, &l)
            })
            .collect();
        assert!((auc_ovr(&p, &y).unwrap() - per.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rank_basics() {
        let r = avg_rank(&[vec![Some(0.1), Some(0.2)], vec![Some(0.3), Some(0.4)]], Direction::LowerIsBetter).unwrap();
        assert_eq!(r.ranks, vec![1.0, 2.0]);
        let r = avg_rank(&[vec![Some(0.5)], vec![Some(0.5)]], Direction::LowerIsBetter).unwrap();
        assert_eq!(r.ranks, vec![1.5, 1.5]);
        let r = avg_rank(&[vec![Some(0.9), None], vec![Some(0.3), Some(0.1)]], Direction::HigherIsBetter).unwrap();
        assert_eq!(r.ranks, vec![1.0, 1.5]);
        assert!(r.incomplete);
    }

    fn dataset(x: Vec<f64>, n: usize, d: usize) -> MaskedDataset {
        let cols = (0..d).map(|j| ColumnMeta::numeric(format!("c{j}"))).collect();
        MaskedDataset::from_values("t", Tensor::new(vec![n, d], x).unwrap(), cols).unwrap()
    }

    #[test]
    fn mae_fixtures() {
        let truth = Tensor::new(vec![3, 1], vec![0.0, 0.0, 0.0]).unwrap();
        let imp = Tensor::new(vec![3, 1], vec![0.5, -1.0, 1.5]).unwrap();
        let mut m = Mask::zeros(3, 1, "t", 0);
        (0..3).for_each(|i| m.set(i, 0, true));
        let id = ColumnScale::identity(1);
        assert_eq!(oos_mae(&imp, &truth, &m, &[0, 1, 2], &id).unwrap(), 1.0);
        assert_eq!(oos_mae(&truth, &truth, &m, &[0, 1, 2], &id).unwrap(), 0.0);
        let ones = Tensor::full(&[3, 1], 1.0);
        assert_eq!(oos_mae(&truth, &ones, &m, &[0, 1, 2], &id).unwrap(), 1.0);
        assert!(oos_mae(&imp, &truth, &Mask::zeros(3, 1, "t", 0), &[0, 1, 2], &id).is_err());
    }

    #[test]
    fn mae_ignores_unmasked_and_train_rows() {
        let truth = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut m = Mask::zeros(4, 2, "t", 0);
        m.set(2, 0, true);
        m.set(0, 1, true);
        let mut imp = truth.clone();
        imp.set(2, 0, 4.0);
        let base = oos_mae(&imp, &truth, &m, &[2, 3], &ColumnScale::identity(2)).unwrap();
        imp.set(3, 1, 100.0);
        imp.set(0, 1, -50.0);
        assert_eq!(oos_mae(&imp, &truth, &m, &[2, 3], &ColumnScale::identity(2)).unwrap(), base);
    }

    #[test]
    fn scale_uses_observed_rows_only() {
        let ds = dataset(vec![1.0, 3.0, f64::NAN, 100.0], 4, 1);
        let s = ColumnScale::from_rows(&ds, &[0, 1, 2]);
        assert_eq!((s.mean[0], s.scale[0]), (2.0, 1.0));
    }

    #[test]
    fn categorical_imputations_are_rounded() {
        let truth = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let imp = Tensor::new(vec![1, 1], vec![1.7]).unwrap();
        let mut m = Mask::zeros(1, 1, "t", 0);
        m.set(0, 0, true);
        let mut s = ColumnScale::identity(1);
        s.levels[0] = Some(3);
        assert_eq!(oos_mae(&imp, &truth, &m, &[0], &s).unwrap(), 0.0);
    }
}
