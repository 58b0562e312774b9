//! Imputation methods evaluated by the protocol: column statistics, the
//! ground-truth oracle and the flow head's posterior-mean fill.

use super::dataset::MaskedDataset;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::missingness::Mask;
use crate::pfn::PfnModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Imputed {
    pub values: Tensor<f64>,
    /// Conditions worth reporting, such as columns with no observed values.
    pub flags: Vec<String>,
}

/// Fills the missing entries of a dataset. Implementations may use the
/// train rows for statistics and must not read values at masked entries.
pub trait Imputer: Sync {
    fn name(&self) -> String;
    fn impute(&self, ds: &MaskedDataset, seed: u64) -> Result<Imputed>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Mean,
    Median,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

fn stat_rows(ds: &MaskedDataset) -> Vec<usize> {
    if ds.train.is_empty() {
        (0..ds.n_rows()).collect()
    } else {
        ds.train.clone()
    }
}

/// Column-wise train statistic fill. A column with no observed train value
/// is filled with 0 and flagged.
pub fn baseline_impute(ds: &MaskedDataset, kind: BaselineKind) -> Imputed {
    let rows = stat_rows(ds);
    let mut values = ds.x.clone();
    let mut flags = Vec::new();
    for j in 0..ds.n_cols() {
        let mut obs: Vec<f64> = rows
            .iter()
            .filter(|&&i| !ds.mask.is_missing(i, j))
            .map(|&i| ds.x.at(i, j))
            .collect();
        let fill = if obs.is_empty() {
            flags.push(format!("column `{}` has no observed train values; filled with 0", ds.columns[j].name));
            0.0
        } else {
            match kind {
                BaselineKind::Mean => obs.iter().sum::<f64>() / obs.len() as f64,
                BaselineKind::Median => {
                    obs.sort_by(f64::total_cmp);
                    let n = obs.len();
                    if n % 2 == 1 { obs[n / 2] } else { 0.5 * (obs[n / 2 - 1] + obs[n / 2]) }
                }
            }
        };
        for i in 0..ds.n_rows() {
            if ds.mask.is_missing(i, j) {
                values.set(i, j, fill);
            }
        }
    }
    Imputed { values, flags }
}

pub struct StatImputer(pub BaselineKind);

impl Imputer for StatImputer {
    fn name(&self) -> String {
        match self.0 {
            BaselineKind::Mean => "mean".into(),
            BaselineKind::Median => "median".into(),
        }
    }

    fn impute(&self, ds: &MaskedDataset, _: u64) -> Result<Imputed> {
        Ok(baseline_impute(ds, self.0))
    }
}

/// Fills every missing entry with a constant.
pub struct ConstantImputer(pub f64);

impl Imputer for ConstantImputer {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }

    fn impute(&self, ds: &MaskedDataset, _: u64) -> Result<Imputed> {
        let mut values = ds.x.clone();
        for i in 0..ds.n_rows() {
            for j in 0..ds.n_cols() {
                if ds.mask.is_missing(i, j) {
                    values.set(i, j, self.0);
                }
            }
        }
        Ok(Imputed { values, flags: Vec::new() })
    }
}

/// Returns the ground truth; the protocol's sanity reference.
pub struct OracleImputer {
    pub truth: Tensor<f64>,
}

impl Imputer for OracleImputer {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn impute(&self, ds: &MaskedDataset, _: u64) -> Result<Imputed> {
        if self.truth.shape() != ds.x.shape() {
            return Err(Error::dim("oracle imputer", "truth shape differs from the dataset"));
        }
        Ok(Imputed {
            values: self.truth.clone(),
            flags: Vec::new(),
        })
    }
}

/// Posterior-mean fill from the flow head: train rows are the context and
/// every row with a missing entry is a query.
pub struct FlowImputer<T: Scalar> {
    pub model: PfnModel<T>,
    pub samples: usize,
    /// Upper bound on context rows (the first train rows are used).
    pub max_context: usize,
    /// Query rows per forward pass.
    pub chunk: usize,
}

impl<T: Scalar> FlowImputer<T> {
    pub fn new(model: PfnModel<T>, samples: usize) -> Self {
        Self {
            model,
            samples,
            max_context: 512,
            chunk: 256,
        }
    }

    /// Posterior-mean fill plus the per-entry standard deviation of the
    /// draws (zero at observed entries).
    pub fn impute_with_spread(&self, ds: &MaskedDataset, seed: u64) -> Result<(Imputed, Tensor<f64>)> {
        let ctx: Vec<usize> = stat_rows(ds).into_iter().take(self.max_context.max(1)).collect();
        let (labels, n_classes) = match &ds.labels {
            Some(y) if ds.n_classes() <= self.model.config.max_classes => (ctx.iter().map(|&i| y[i]).collect(), ds.n_classes().max(1)),
            _ => (vec![0; ctx.len()], 1),
        };
        let c = ds.select_rows(&ctx);
        let queries: Vec<usize> = (0..ds.n_rows()).filter(|&i| ds.mask.row(i).contains(&1)).collect();
        let mut values = ds.x.clone();
        let mut spread = Tensor::zeros(&[ds.n_rows(), ds.n_cols()]);
        for (b, chunk) in queries.chunks(self.chunk.max(1)).enumerate() {
            let q = ds.select_rows(chunk);
            let ep = Episode::new(&c.x, &c.mask, &labels, &q.x, &q.mask, n_classes)?;
            let out = self.model.impute(&ep, &q.x, self.samples, crate::seed::derive(seed, &[b as u64]))?;
            for (r, &i) in chunk.iter().enumerate() {
                for j in 0..ds.n_cols() {
                    if ds.mask.is_missing(i, j) {
                        values.set(i, j, out.completed.at(r, j));
                        spread.set(i, j, out.spread.at(r, j));
                    }
                }
            }
        }
        Ok((Imputed { values, flags: Vec::new() }, spread))
    }
}

impl<T: Scalar> Imputer for FlowImputer<T> {
    fn name(&self) -> String {
        "pfn-flow".into()
    }

    fn impute(&self, ds: &MaskedDataset, seed: u64) -> Result<Imputed> {
        self.impute_with_spread(ds, seed).map(|(imp, _)| imp)
    }
}

/// Mask with every entry of `rows` observed and the rest copied from `mask`.
pub(crate) fn restrict_mask(mask: &Mask, rows: &[usize]) -> Mask {
    let mut out = Mask::zeros(mask.rows(), mask.cols(), &mask.provenance.mechanism, mask.provenance.seed);
    out.provenance = mask.provenance.clone();
    for &i in rows {
        for j in 0..mask.cols() {
            out.set(i, j, mask.is_missing(i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::dataset::ColumnMeta;

    fn ds(x: Vec<f64>, n: usize, d: usize) -> MaskedDataset {
        let cols = (0..d).map(|j| ColumnMeta::numeric(format!("c{j}"))).collect();
        MaskedDataset::from_values("t", Tensor::new(vec![n, d], x).unwrap(), cols).unwrap()
    }

    #[test]
    fn mean_fill_uses_train_statistics() {
        let mut d = ds(vec![1.0, 3.0, f64::NAN, 50.0], 4, 1);
        d.train = vec![0, 1, 2];
        d.test = vec![3];
        let out = baseline_impute(&d, BaselineKind::Mean);
        assert_eq!(out.values.at(2, 0), 2.0);
        assert_eq!(out.values.at(3, 0), 50.0);
    }

    #[test]
    fn median_fill() {
        let d = ds(vec![1.0, 7.0, 2.0, f64::NAN], 4, 1);
        assert_eq!(baseline_impute(&d, BaselineKind::Median).values.at(3, 0), 2.0);
    }

    #[test]
    fn complete_data_is_unchanged() {
        let d = ds(vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        assert_eq!(baseline_impute(&d, BaselineKind::Mean).values, d.x);
    }

    #[test]
    fn empty_column_is_flagged() {
        let d = ds(vec![1.0, f64::NAN, 2.0, f64::NAN], 2, 2);
        let out = baseline_impute(&d, BaselineKind::Mean);
        assert_eq!(out.values.at(0, 1), 0.0);
        assert_eq!(out.flags.len(), 1);
    }
}
