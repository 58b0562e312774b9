//! Finite priors over discrete tasks and exact Bayesian inference by
//! enumeration.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dist::DiscreteDistribution;
use crate::episode::{Episode, Standardizer};
use crate::error::{Error, Result};
use crate::missingness::{Mask, Provenance};
use crate::seed;
use crate::tensor::Tensor;
use crate::train::TaskPrior;

pub const MAX_FEATURES: usize = 4;
pub const MAX_CLASSES: usize = 3;

/// One observed row: `None` marks a missing feature. The label is absent for
/// queries.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObsRow {
    pub values: Vec<Option<usize>>,
    pub label: Option<usize>,
}

impl ObsRow {
    pub fn new(values: Vec<Option<usize>>, label: Option<usize>) -> Self {
        Self { values, label }
    }

    pub fn mask_bits(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .fold(0, |acc, (j, _)| acc | (1 << j))
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&j| self.values[j].is_none()).collect()
    }

    pub fn unlabeled(&self) -> Self {
        Self::new(self.values.clone(), None)
    }

    /// Fills the missing coordinates, in order, from `completion`.
    fn complete(&self, completion: &[usize]) -> Vec<usize> {
        let mut it = completion.iter();
        self.values
            .iter()
            .map(|v| v.unwrap_or_else(|| *it.next().expect("completion length")))
            .collect()
    }
}

/// Full joint table `P(x, y, m)` for one task. Entries are laid out with the
/// mixed-radix feature index outermost, then the label, then the mask bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTable {
    pub levels: Vec<usize>,
    pub n_classes: usize,
    pub probs: Vec<f64>,
}

impl TaskTable {
    pub fn new(levels: Vec<usize>, n_classes: usize, probs: Vec<f64>) -> Result<Self> {
        let d = levels.len();
        if d == 0 || d > MAX_FEATURES || levels.iter().any(|&k| k == 0) {
            return Err(Error::Contract(format!("task needs 1..={MAX_FEATURES} features with positive levels")));
        }
        if n_classes == 0 || n_classes > MAX_CLASSES {
            return Err(Error::Contract(format!("task needs 1..={MAX_CLASSES} classes")));
        }
        let size = levels.iter().product::<usize>() * n_classes << d;
        if probs.len() != size {
            return Err(Error::dim("task table", format!("{} entries, expected {size}", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Contract("task table entries must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("task table sums to {total}")));
        }
        Ok(Self { levels, n_classes, probs })
    }

    /// Builds the table from a generative factorization; the result is
    /// renormalized to absorb rounding.
    pub fn from_fn(levels: Vec<usize>, n_classes: usize, f: impl Fn(&[usize], usize, usize) -> f64) -> Result<Self> {
        let d = levels.len();
        let mut probs = Vec::new();
        for x in completions(&levels) {
            for y in 0..n_classes {
                for m in 0..1usize << d {
                    probs.push(f(&x, y, m));
                }
            }
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Contract("task table has no mass".into()));
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Self::new(levels, n_classes, probs)
    }

    pub fn n_features(&self) -> usize {
        self.levels.len()
    }

    fn x_index(&self, x: &[usize]) -> usize {
        x.iter().zip(&self.levels).fold(0, |acc, (&v, &k)| acc * k + v)
    }

    pub fn joint(&self, x: &[usize], y: usize, m: usize) -> f64 {
        let d = self.n_features();
        self.probs[((self.x_index(x) * self.n_classes + y) << d) + m]
    }

    fn check_row(&self, row: &ObsRow) -> Result<()> {
        if row.values.len() != self.n_features() {
            return Err(Error::dim("observed row", format!("{} values for {} features", row.values.len(), self.n_features())));
        }
        for (v, &k) in row.values.iter().zip(&self.levels) {
            if matches!(v, Some(l) if *l >= k) {
                return Err(Error::Contract(format!("level {v:?} outside 0..{k}")));
            }
        }
        if matches!(row.label, Some(y) if y >= self.n_classes) {
            return Err(Error::Contract(format!("label {:?} outside 0..{}", row.label, self.n_classes)));
        }
        Ok(())
    }

    fn missing_levels(&self, row: &ObsRow) -> Vec<usize> {
        row.missing().iter().map(|&j| self.levels[j]).collect()
    }

    /// Probability of the observation: summed over completions of the
    /// missing features and, when the label is absent, over labels.
    pub fn row_prob(&self, row: &ObsRow) -> f64 {
        let m = row.mask_bits();
        let labels: Vec<usize> = match row.label {
            Some(y) => vec![y],
            None => (0..self.n_classes).collect(),
        };
        let mut s = 0.0;
        for c in completions(&self.missing_levels(row)) {
            let x = row.complete(&c);
            for &y in &labels {
                s += self.joint(&x, y, m);
            }
        }
        s
    }

    /// Draws `(x, y, m)` and returns the observed row.
    pub fn sample(&self, rng: &mut seed::Rng) -> (ObsRow, Vec<usize>) {
        let d = self.n_features();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.probs.len() - 1;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        let m = pick & ((1 << d) - 1);
        let rest = pick >> d;
        let y = rest % self.n_classes;
        let mut xi = rest / self.n_classes;
        let mut x = vec![0; d];
        for j in (0..d).rev() {
            x[j] = xi % self.levels[j];
            xi /= self.levels[j];
        }
        let values = (0..d).map(|j| if m >> j & 1 == 1 { None } else { Some(x[j]) }).collect();
        (ObsRow::new(values, Some(y)), x)
    }
}

/// All assignments over the given cardinalities, first coordinate slowest.
pub fn completions(levels: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &k in levels {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePrior {
    pub tasks: Vec<TaskTable>,
    pub weights: Vec<f64>,
}

impl DiscretePrior {
    pub fn new(tasks: Vec<TaskTable>, weights: Vec<f64>) -> Result<Self> {
        if tasks.is_empty() || tasks.len() != weights.len() {
            return Err(Error::Contract("prior needs one positive weight per task".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Contract("prior weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("prior weights sum to {total}")));
        }
        if tasks.iter().any(|t| t.levels != tasks[0].levels || t.n_classes != tasks[0].n_classes) {
            return Err(Error::Contract("tasks disagree on feature levels or class count".into()));
        }
        Ok(Self { tasks, weights })
    }

    pub fn uniform(tasks: Vec<TaskTable>) -> Result<Self> {
        let n = tasks.len();
        Self::new(tasks, vec![1.0 / n as f64; n])
    }

    pub fn levels(&self) -> &[usize] {
        &self.tasks[0].levels
    }

    pub fn n_features(&self) -> usize {
        self.tasks[0].n_features()
    }

    pub fn n_classes(&self) -> usize {
        self.tasks[0].n_classes
    }

    /// Eight binary-feature, two-class tasks. Labels drive the features;
    /// each feature's missingness depends on its own value (X→M) and on
    /// whether the previous feature is missing (M→M).
    pub fn benchmark(seed: u64) -> Result<Self> {
        let d = 3;
        let mut rng = seed::rng(seed);
        let mut tasks = Vec::new();
        for _ in 0..8 {
            let prior_y: f64 = rng.random_range(0.25..0.75);
            // Each feature leans towards one label, in a task-specific direction.
            let theta: Vec<[f64; 2]> = (0..d)
                .map(|_| {
                    let lo: f64 = rng.random_range(0.05..0.3);
                    let hi: f64 = rng.random_range(0.7..0.95);
                    if rng.random::<bool>() { [lo, hi] } else { [hi, lo] }
                })
                .collect();
            let bias: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..-0.5)).collect();
            let on_value: f64 = rng.random_range(-1.5..1.5);
            let on_prev: f64 = rng.random_range(0.0..1.5);
            let task = TaskTable::from_fn(vec![2; d], 2, |x, y, m| {
                let mut p = if y == 1 { prior_y } else { 1.0 - prior_y };
                for j in 0..d {
                    let t = theta[j][y];
                    p *= if x[j] == 1 { t } else { 1.0 - t };
                    let prev = if j > 0 { (m >> (j - 1) & 1) as f64 } else { 0.0 };
                    let q = sigmoid(bias[j] + on_value * x[j] as f64 + on_prev * prev);
                    p *= if m >> j & 1 == 1 { q } else { 1.0 - q };
                }
                p
            })?;
            tasks.push(task);
        }
        Self::uniform(tasks)
    }

    fn check_rows(&self, rows: &[ObsRow]) -> Result<()> {
        rows.iter().try_for_each(|r| self.tasks[0].check_row(r))
    }

    /// Log-likelihood of the context under each task, plus the log weight.
    fn log_task_scores(&self, context: &[ObsRow]) -> Vec<f64> {
        self.tasks
            .iter()
            .zip(&self.weights)
            .map(|(t, &w)| context.iter().map(|r| t.row_prob(r).ln()).sum::<f64>() + w.ln())
            .collect()
    }

    /// Posterior over tasks given the context.
    pub fn task_posterior(&self, context: &[ObsRow]) -> Result<Vec<f64>> {
        self.check_rows(context)?;
        normalize_log(&self.log_task_scores(context))
    }

    /// Mixes per-task quantities under the posterior over tasks given the
    /// context, normalizing across the returned vector.
    fn mix(&self, context: &[ObsRow], per_task: impl Fn(&TaskTable) -> Vec<f64>) -> Result<Vec<f64>> {
        let post = self.task_posterior(context)?;
        let mut out: Vec<f64> = Vec::new();
        for (t, &w) in self.tasks.iter().zip(&post) {
            let v = per_task(t);
            if out.is_empty() {
                out = vec![0.0; v.len()];
            }
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
        let total: f64 = out.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ImpossibleContext);
        }
        out.iter_mut().for_each(|o| *o /= total);
        Ok(out)
    }

    /// Class probabilities for the query as a vector.
    pub fn ppd(&self, context: &[ObsRow], query: &ObsRow) -> Result<Vec<f64>> {
        self.check_rows(std::slice::from_ref(query))?;
        let q = query.unlabeled();
        self.mix(context, |t| {
            (0..t.n_classes)
                .map(|y| t.row_prob(&ObsRow::new(q.values.clone(), Some(y))))
                .collect()
        })
    }

    /// `P(y | x_m, x_obs, m, D)` for a completion of the query's missing
    /// features.
    pub fn conditional_predictive(&self, context: &[ObsRow], query: &ObsRow, completion: &[usize]) -> Result<Vec<f64>> {
        self.check_rows(std::slice::from_ref(query))?;
        if completion.len() != query.missing().len() {
            return Err(Error::dim("completion", format!("{} values for {} missing", completion.len(), query.missing().len())));
        }
        let x = query.complete(completion);
        let m = query.mask_bits();
        self.mix(context, |t| (0..t.n_classes).map(|y| t.joint(&x, y, m)).collect())
    }

    /// Posterior over completions of the query's missing features, in the
    /// order of [`completions`].
    pub fn missing_posterior(&self, context: &[ObsRow], query: &ObsRow) -> Result<Vec<f64>> {
        self.check_rows(std::slice::from_ref(query))?;
        let q = query.unlabeled();
        let levels = self.tasks[0].missing_levels(&q);
        let m = q.mask_bits();
        self.mix(context, |t| {
            completions(&levels)
                .iter()
                .map(|c| {
                    let x = q.complete(c);
                    (0..t.n_classes).map(|y| t.joint(&x, y, m)).sum()
                })
                .collect()
        })
    }

    /// Every unlabeled observation pattern: each feature observed at one of
    /// its levels or missing.
    pub fn observation_space(&self) -> Vec<ObsRow> {
        let extended: Vec<usize> = self.levels().iter().map(|&k| k + 1).collect();
        completions(&extended)
            .into_iter()
            .map(|c| {
                let values = c.iter().zip(self.levels()).map(|(&v, &k)| (v < k).then_some(v)).collect();
                ObsRow::new(values, None)
            })
            .collect()
    }

    pub fn labeled_space(&self) -> Vec<ObsRow> {
        let mut out = Vec::new();
        for r in self.observation_space() {
            for y in 0..self.n_classes() {
                out.push(ObsRow::new(r.values.clone(), Some(y)));
            }
        }
        out
    }

    pub fn sample_task(&self, rng: &mut seed::Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// One task's worth of labelled rows.
    pub fn sample_rows(&self, n: usize, seed: u64) -> Vec<ObsRow> {
        let mut rng = seed::rng(seed);
        let t = &self.tasks[self.sample_task(&mut rng)];
        (0..n).map(|_| t.sample(&mut rng).0).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn normalize_log(scores: &[f64]) -> Result<Vec<f64>> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::ImpossibleContext);
    }
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

fn label_support(c: usize) -> Vec<Vec<f64>> {
    (0..c).map(|y| vec![y as f64]).collect()
}

/// Exact posterior predictive over labels for `query` given `context`.
pub fn exact_posterior_predictive(prior: &DiscretePrior, context: &[ObsRow], query: &ObsRow) -> Result<DiscreteDistribution> {
    let p = prior.ppd(context, query)?;
    Ok(DiscreteDistribution {
        support: label_support(p.len()),
        probs: p,
    })
}

/// Exact posterior over the query's missing coordinates, as level indices.
/// A fully observed query gives a point mass on the empty completion.
pub fn exact_missing_posterior(prior: &DiscretePrior, context: &[ObsRow], query: &ObsRow) -> Result<DiscreteDistribution> {
    let probs = prior.missing_posterior(context, query)?;
    let levels: Vec<usize> = query.missing().iter().map(|&j| prior.levels()[j]).collect();
    let support = completions(&levels)
        .into_iter()
        .map(|c| c.into_iter().map(|v| v as f64).collect())
        .collect();
    Ok(DiscreteDistribution { support, probs })
}

/// Builds a PFN episode from observed rows. Values are the raw level indices
/// (no standardization).
pub fn rows_to_episode(context: &[ObsRow], queries: &[ObsRow], n_classes: usize) -> Result<Episode> {
    let d = context
        .first()
        .or(queries.first())
        .map(|r| r.values.len())
        .ok_or_else(|| Error::Contract("no rows".into()))?;
    let to_tensor = |rows: &[ObsRow]| -> Result<(Tensor<f64>, Mask)> {
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut bits = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.values.len() != d {
                return Err(Error::dim("episode rows", "ragged rows"));
            }
            for v in &r.values {
                data.push(v.map_or(0.0, |l| l as f64));
                bits.push(u8::from(v.is_none()));
            }
        }
        let prov = Provenance {
            mechanism: "discrete".into(),
            seed: 0,
            params: serde_json::Value::Null,
        };
        Ok((Tensor::new(vec![rows.len(), d], data)?, Mask::from_bits(rows.len(), d, bits, prov)?))
    };
    let (xc, mc) = to_tensor(context)?;
    let (xq, mq) = to_tensor(queries)?;
    let yc: Vec<usize> = context
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::Contract("context row without label".into())))
        .collect::<Result<_>>()?;
    let ep = Episode::with_scaler(&xc, &mc, &yc, &xq, &mq, n_classes, Standardizer::identity(d))?;
    if queries.iter().all(|q| q.label.is_some()) {
        let yq: Vec<usize> = queries.iter().map(|q| q.label.expect("checked")).collect();
        ep.with_query_labels(&yq)
    } else {
        Ok(ep)
    }
}

/// Training episodes from a discrete prior: one task per episode, a fixed
/// number of context and query rows.
#[derive(Clone, Debug)]
pub struct DiscreteEpisodes {
    pub prior: DiscretePrior,
    pub n_context: usize,
    pub n_queries: usize,
}

impl TaskPrior for DiscreteEpisodes {
    fn sample(&self, seed: u64, _step: usize) -> Result<Episode> {
        let rows = self.prior.sample_rows(self.n_context + self.n_queries, seed);
        let (ctx, q) = rows.split_at(self.n_context);
        rows_to_episode(ctx, q, self.prior.n_classes())
    }
}
