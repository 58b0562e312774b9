//! Tabular datasets with a missingness mask, CSV IO and train/test splits.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::{Mask, Provenance};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    /// Level names of a categorical column; level `i` is coded as `i`.
    #[serde(default)]
    pub levels: Vec<String>,
}

impl ColumnMeta {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            levels: Vec::new(),
        }
    }

    pub fn n_levels(&self) -> Option<usize> {
        (self.kind == ColumnKind::Categorical).then_some(self.levels.len())
    }

    fn decode(&self, v: f64) -> String {
        match self.kind {
            ColumnKind::Numeric => format!("{v}"),
            // Imputed codes are continuous; snap to the nearest level.
            ColumnKind::Categorical => {
                let last = self.levels.len().saturating_sub(1);
                self.levels[(v.round().max(0.0) as usize).min(last)].clone()
            }
        }
    }
}

/// Feature table with NaN at missing entries, the mask, optional labels and
/// an optional train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDataset {
    pub name: String,
    pub x: Tensor<f64>,
    pub mask: Mask,
    pub labels: Option<Vec<usize>>,
    pub label_meta: Option<ColumnMeta>,
    pub columns: Vec<ColumnMeta>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl MaskedDataset {
    /// Builds a dataset from values where NaN marks missing.
    pub fn from_values(name: impl Into<String>, x: Tensor<f64>, columns: Vec<ColumnMeta>) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if columns.len() != d {
            return Err(Error::dim("dataset", format!("{} column descriptions for {d} columns", columns.len())));
        }
        let bits = x.data().iter().map(|v| u8::from(v.is_nan())).collect();
        let prov = Provenance {
            mechanism: "observed".into(),
            seed: 0,
            params: serde_json::Value::Null,
        };
        let mask = Mask::from_bits(n, d, bits, prov)?;
        let ds = Self {
            name: name.into(),
            x,
            mask,
            labels: None,
            label_meta: None,
            columns,
            train: Vec::new(),
            test: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        match (&self.label_meta, &self.labels) {
            (Some(m), _) => m.levels.len(),
            (None, Some(y)) => y.iter().max().map_or(0, |m| m + 1),
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n_rows(), self.n_cols());
        if self.mask.rows() != n || self.mask.cols() != d {
            return Err(Error::dim("dataset", "mask shape differs from the feature table"));
        }
        for i in 0..n {
            for j in 0..d {
                let v = self.x.at(i, j);
                if !self.mask.is_missing(i, j) {
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("observed entry ({i}, {j})")));
                    }
                    if let Some(k) = self.columns[j].n_levels() {
                        if v < 0.0 || v.fract() != 0.0 || v as usize >= k {
                            return Err(Error::Contract(format!("entry ({i}, {j}) = {v} is not a level code")));
                        }
                    }
                }
            }
        }
        if let Some(y) = &self.labels {
            if y.len() != n {
                return Err(Error::dim("dataset", "label count differs from row count"));
            }
        }
        let train: BTreeSet<usize> = self.train.iter().copied().collect();
        if self.test.iter().any(|i| train.contains(i)) || self.train.iter().chain(&self.test).any(|&i| i >= n) {
            return Err(Error::Contract("train and test rows must be disjoint row indices".into()));
        }
        Ok(())
    }

    /// Copy with `mask` applied on top of the current one: newly masked
    /// entries become NaN.
    pub fn with_mask(&self, mask: &Mask) -> Result<Self> {
        if mask.rows() != self.n_rows() || mask.cols() != self.n_cols() {
            return Err(Error::dim("with_mask", "mask shape differs from the feature table"));
        }
        let mut out = self.clone();
        for i in 0..self.n_rows() {
            for j in 0..self.n_cols() {
                if mask.is_missing(i, j) {
                    out.mask.set(i, j, true);
                    out.x.set(i, j, f64::NAN);
                }
            }
        }
        out.mask.provenance = mask.provenance.clone();
        Ok(out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let d = self.n_cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Self {
            name: self.name.clone(),
            x: Tensor::new(vec![idx.len(), d], data).expect("shape matches"),
            mask: self.mask.select_rows(idx),
            labels: self.labels.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
            label_meta: self.label_meta.clone(),
            columns: self.columns.clone(),
            train: Vec::new(),
            test: Vec::new(),
        }
    }
}

/// Reads a CSV with a header row. Empty cells are missing. A column is
/// numeric when every non-empty cell parses as a number, otherwise
/// categorical with levels in sorted order. `meta` overrides the inferred
/// column descriptions.
pub fn read_csv(path: &Path, label_col: Option<&str>, meta: Option<&[ColumnMeta]>) -> Result<MaskedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut cells: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        cells.push(rec.iter().map(|c| c.trim().to_string()).collect());
    }
    let name = path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    from_cells(&name, &header, &cells, label_col, meta)
}

pub(crate) fn from_cells(
    name: &str,
    header: &[String],
    cells: &[Vec<String>],
    label_col: Option<&str>,
    meta: Option<&[ColumnMeta]>,
) -> Result<MaskedDataset> {
    let label_idx = match label_col {
        Some(l) => Some(
            header
                .iter()
                .position(|h| h == l)
                .ok_or_else(|| Error::Contract(format!("no column named `{l}`")))?,
        ),
        None => None,
    };
    let mut all_meta: Vec<ColumnMeta> = (0..header.len()).map(|j| infer_column(&header[j], cells, j)).collect();
    if let Some(m) = meta {
        for given in m {
            if let Some(j) = header.iter().position(|h| *h == given.name) {
                all_meta[j] = given.clone();
            }
        }
    }
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&j| Some(j) != label_idx).collect();
    let n = cells.len();
    let mut data = Vec::with_capacity(n * feature_cols.len());
    for (i, row) in cells.iter().enumerate() {
        for &j in &feature_cols {
            data.push(encode(&all_meta[j], row, i, j)?);
        }
    }
    let columns = feature_cols.iter().map(|&j| all_meta[j].clone()).collect();
    let mut ds = MaskedDataset::from_values(name, Tensor::new(vec![n, feature_cols.len()], data)?, columns)?;
    if let Some(l) = label_idx {
        let mut m = all_meta[l].clone();
        if m.kind == ColumnKind::Numeric {
            m = categorical_from(&header[l], cells, l, true);
        }
        let y = cells
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let v = encode(&m, row, i, l)?;
                if v.is_nan() {
                    Err(Error::Contract(format!("row {i} has no label")))
                } else {
                    Ok(v as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ds.labels = Some(y);
        ds.label_meta = Some(m);
    }
    Ok(ds)
}

fn infer_column(name: &str, cells: &[Vec<String>], j: usize) -> ColumnMeta {
    let numeric = cells
        .iter()
        .filter_map(|r| r.get(j))
        .filter(|c| !c.is_empty())
        .all(|c| c.parse::<f64>().is_ok_and(f64::is_finite));
    if numeric {
        ColumnMeta::numeric(name)
    } else {
        categorical_from(name, cells, j, false)
    }
}

/// Levels sorted numerically when every value is a number, else as strings.
fn categorical_from(name: &str, cells: &[Vec<String>], j: usize, numeric_sort: bool) -> ColumnMeta {
    let mut levels: Vec<String> = cells
        .iter()
        .filter_map(|r| r.get(j))
        .filter(|c| !c.is_empty())
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if numeric_sort {
        levels.sort_by(|a, b| a.parse::<f64>().unwrap_or(0.0).total_cmp(&b.parse::<f64>().unwrap_or(0.0)));
    }
    ColumnMeta {
        name: name.into(),
        kind: ColumnKind::Categorical,
        levels,
    }
}

fn encode(meta: &ColumnMeta, row: &[String], i: usize, j: usize) -> Result<f64> {
    let cell = row
        .get(j)
        .ok_or_else(|| Error::Contract(format!("row {i} has {} cells", row.len())))?;
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    match meta.kind {
        ColumnKind::Numeric => cell
            .parse::<f64>()
            .map_err(|_| Error::Contract(format!("row {i}, column `{}`: `{cell}` is not a number", meta.name))),
        ColumnKind::Categorical => meta
            .levels
            .iter()
            .position(|l| l == cell)
            .map(|p| p as f64)
            .ok_or_else(|| Error::Contract(format!("row {i}, column `{}`: unknown level `{cell}`", meta.name))),
    }
}

/// Writes features (and labels, last) with missing entries as empty cells.
/// Categorical codes are written back as level names.
pub fn write_csv(path: &Path, ds: &MaskedDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ds.columns.iter().map(|c| c.name.clone()).collect();
    if ds.labels.is_some() {
        header.push(ds.label_meta.as_ref().map_or_else(|| "label".into(), |m| m.name.clone()));
    }
    w.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut rec: Vec<String> = (0..ds.n_cols())
            .map(|j| {
                if ds.mask.is_missing(i, j) {
                    String::new()
                } else {
                    ds.columns[j].decode(ds.x.at(i, j))
                }
            })
            .collect();
        if let Some(y) = &ds.labels {
            rec.push(match &ds.label_meta {
                Some(m) => m.levels[y[i]].clone(),
                None => y[i].to_string(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes a 0/1 mask with the dataset's column names as header.
pub fn write_mask_csv(path: &Path, mask: &Mask, columns: &[ColumnMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(columns.iter().map(|c| c.name.as_str()))?;
    for i in 0..mask.rows() {
        w.write_record(mask.row(i).iter().map(|b| b.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Shuffles rows and puts `round(ratio·n)` of them in the train split; with
/// `stratify`, the rule is applied within each label class. Both index lists
/// are returned sorted.
pub fn split_dataset(n: usize, ratio: f64, seed: u64, stratify: Option<&[usize]>) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(Error::Contract(format!("splitting needs at least 10 rows, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = seed::rng(seed);
    let groups: Vec<Vec<usize>> = match stratify {
        None => vec![(0..n).collect()],
        Some(y) => {
            if y.len() != n {
                return Err(Error::dim("split", "label count differs from row count"));
            }
            let c = y.iter().max().map_or(0, |m| m + 1);
            (0..c).map(|k| (0..n).filter(|&i| y[i] == k).collect()).collect()
        }
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut g in groups {
        g.shuffle(&mut rng);
        let k = (ratio * g.len() as f64).round() as usize;
        train.extend_from_slice(&g[..k]);
        test.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
