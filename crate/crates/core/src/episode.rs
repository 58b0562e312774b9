//! Model inputs: one labelled context set plus query rows, standardized by
//! observed context statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::Mask;
use crate::scm::SyntheticTask;
use crate::tensor::Tensor;

/// Per-column affine map fitted on observed context entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor<f64>, mask: &Mask) -> Self {
        let d = x.cols();
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let vals: Vec<f64> = (0..x.rows()).filter(|&i| !mask.is_missing(i, j)).map(|i| x.at(i, j)).collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[j] = m;
            if var.sqrt() > 1e-8 {
                scale[j] = var.sqrt();
            }
        }
        Self { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn forward(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.scale[j]
    }

    pub fn inverse(&self, j: usize, v: f64) -> f64 {
        v * self.scale[j] + self.mean[j]
    }
}

/// Standardized values with zeros at missing entries, plus the 0/1 mask.
fn observed(x: &Tensor<f64>, mask: &Mask, sc: &Standardizer) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if mask.rows() != x.rows() || mask.cols() != x.cols() {
        return Err(Error::dim(
            "episode",
            format!("values {:?} vs mask {}×{}", x.shape(), mask.rows(), mask.cols()),
        ));
    }
    let (n, d) = (x.rows(), x.cols());
    let mut xo = Tensor::zeros(&[n, d]);
    let mut m = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..d {
            if mask.is_missing(i, j) {
                m.set(i, j, 1.0);
            } else {
                let v = x.at(i, j);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("observed entry ({i}, {j}) is {v}")));
                }
                xo.set(i, j, sc.forward(j, v));
            }
        }
    }
    Ok((xo, m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_classes: usize,
    pub x_ctx: Tensor<f64>,
    pub m_ctx: Tensor<f64>,
    pub y_ctx: Vec<usize>,
    pub x_q: Tensor<f64>,
    pub m_q: Tensor<f64>,
    pub y_q: Option<Vec<usize>>,
    /// Complete standardized query values, when known (flow targets).
    pub x_q_full: Option<Tensor<f64>>,
    pub scaler: Standardizer,
}

impl Episode {
    /// Values at missing entries are ignored and may be NaN.
    pub fn new(
        x_ctx: &Tensor<f64>,
        m_ctx: &Mask,
        y_ctx: &[usize],
        x_q: &Tensor<f64>,
        m_q: &Mask,
        n_classes: usize,
    ) -> Result<Self> {
        Self::with_scaler(x_ctx, m_ctx, y_ctx, x_q, m_q, n_classes, Standardizer::fit(x_ctx, m_ctx))
    }

    pub fn with_scaler(
        x_ctx: &Tensor<f64>,
        m_ctx: &Mask,
        y_ctx: &[usize],
        x_q: &Tensor<f64>,
        m_q: &Mask,
        n_classes: usize,
        scaler: Standardizer,
    ) -> Result<Self> {
        if x_q.rows() == 0 {
            return Err(Error::Contract("episode needs at least one query row".into()));
        }
        if x_ctx.cols() != x_q.cols() || scaler.mean.len() != x_ctx.cols() {
            return Err(Error::dim("episode", format!("context {:?} vs query {:?}", x_ctx.shape(), x_q.shape())));
        }
        if y_ctx.len() != x_ctx.rows() {
            return Err(Error::dim("episode", format!("{} labels for {} context rows", y_ctx.len(), x_ctx.rows())));
        }
        if n_classes == 0 {
            return Err(Error::Contract("episode needs at least one class".into()));
        }
        if let Some(&y) = y_ctx.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Contract(format!("label {y} out of range for {n_classes} classes")));
        }
        let (xc, mc) = observed(x_ctx, m_ctx, &scaler)?;
        let (xq, mq) = observed(x_q, m_q, &scaler)?;
        Ok(Self {
            n_classes,
            x_ctx: xc,
            m_ctx: mc,
            y_ctx: y_ctx.to_vec(),
            x_q: xq,
            m_q: mq,
            y_q: None,
            x_q_full: None,
            scaler,
        })
    }

    pub fn with_query_labels(mut self, y: &[usize]) -> Result<Self> {
        if y.len() != self.n_queries() || y.iter().any(|&c| c >= self.n_classes) {
            return Err(Error::Contract("query labels do not match the episode".into()));
        }
        self.y_q = Some(y.to_vec());
        Ok(self)
    }

    /// Attaches complete raw query values as flow-matching targets.
    pub fn with_query_truth(mut self, x_full: &Tensor<f64>) -> Result<Self> {
        if x_full.shape() != self.x_q.shape() {
            return Err(Error::dim("episode", "query truth shape"));
        }
        let mut t = x_full.clone();
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                t.set(i, j, self.scaler.forward(j, x_full.at(i, j)));
            }
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("query truth".into()));
        }
        self.x_q_full = Some(t);
        Ok(self)
    }

    pub fn from_task(task: &SyntheticTask) -> Result<Self> {
        let n = task.n_rows();
        let ctx: Vec<usize> = (0..task.split).collect();
        let qry: Vec<usize> = (task.split..n).collect();
        let xq = task.x.select_rows(&qry);
        Self::new(
            &task.x.select_rows(&ctx),
            &task.mask.select_rows(&ctx),
            &task.y[..task.split],
            &xq,
            &task.mask.select_rows(&qry),
            task.n_classes(),
        )?
        .with_query_labels(&task.y[task.split..])?
        .with_query_truth(&xq)
    }

    pub fn n_context(&self) -> usize {
        self.x_ctx.rows()
    }

    pub fn n_queries(&self) -> usize {
        self.x_q.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x_ctx.cols()
    }

    /// Number of missing query entries.
    pub fn n_query_missing(&self) -> usize {
        self.m_q.data().iter().filter(|&&m| m > 0.5).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_uses_observed_entries_only() {
        let x = Tensor::from_rows(&[vec![1.0, f64::NAN], vec![3.0, 5.0], vec![f64::NAN, 7.0]]).unwrap();
        let mut m = Mask::zeros(3, 2, "test", 0);
        m.set(0, 1, true);
        m.set(2, 0, true);
        let s = Standardizer::fit(&x, &m);
        assert_eq!(s.mean, vec![2.0, 6.0]);
        assert_eq!(s.scale, vec![1.0, 1.0]);
        let ep = Episode::new(&x, &m, &[0, 1, 0], &x, &m, 2).unwrap();
        assert_eq!(ep.x_ctx.at(0, 1), 0.0);
        assert_eq!(ep.m_ctx.at(0, 1), 1.0);
        assert_eq!(ep.x_ctx.at(1, 0), 1.0);
        assert!((s.inverse(1, s.forward(1, 4.5)) - 4.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_labels_and_nan_observed() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let m = Mask::zeros(2, 1, "test", 0);
        assert!(Episode::new(&x, &m, &[0, 2], &x, &m, 2).is_err());
        let bad = Tensor::from_rows(&[vec![f64::NAN], vec![2.0]]).unwrap();
        assert!(Episode::new(&x, &m, &[0, 1], &bad, &m, 2).is_err());
    }
}
