//! Finite distributions and the distances between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest support handled by the exact transport solver.
pub const MAX_TRANSPORT_ATOMS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pub support: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl DiscreteDistribution {
    /// Checks that `probs` is a probability vector (to 1e-12) over distinct points.
    pub fn new(support: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::Contract(format!(
                "{} support points for {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Contract("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("probabilities sum to {total}")));
        }
        let dim = support[0].len();
        for (i, a) in support.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::Contract("support points differ in dimension".into()));
            }
            if support[..i].contains(a) {
                return Err(Error::Contract(format!("duplicate support point {a:?}")));
            }
        }
        Ok(Self { support, probs })
    }

    /// Scalar support.
    pub fn scalar(points: &[f64], probs: &[f64]) -> Result<Self> {
        Self::new(points.iter().map(|&p| vec![p]).collect(), probs.to_vec())
    }

    pub fn point_mass(point: Vec<f64>) -> Self {
        Self {
            support: vec![point],
            probs: vec![1.0],
        }
    }

    /// Empirical distribution of `samples`, merging repeated points.
    pub fn empirical(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empirical distribution of no samples".into()));
        }
        let mut support: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for s in samples {
            match support.iter().position(|p| p == s) {
                Some(i) => counts[i] += 1,
                None => {
                    support.push(s.clone());
                    counts.push(1);
                }
            }
        }
        let n = samples.len() as f64;
        Ok(Self {
            support,
            probs: counts.into_iter().map(|c| c as f64 / n).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob_of(&self, point: &[f64]) -> f64 {
        self.support
            .iter()
            .position(|p| p == point)
            .map_or(0.0, |i| self.probs[i])
    }

    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.support.iter().zip(&self.probs).map(|(x, &p)| p * f(x)).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (x, &p) in self.support.iter().zip(&self.probs) {
            for (mi, &xi) in m.iter_mut().zip(x) {
                *mi += p * xi;
            }
        }
        m
    }

    /// Mixture `(1−w)·self + w·other`.
    pub fn mix(&self, other: &Self, w: f64) -> Result<Self> {
        let (support, a, b) = merged(self, other)?;
        let probs = a.iter().zip(&b).map(|(x, y)| (1.0 - w) * x + w * y).collect();
        Ok(Self { support, probs })
    }
}

/// Union support with both probability vectors aligned to it.
pub fn merged(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    if p.dim() != q.dim() {
        return Err(Error::Contract(format!("dimension {} vs {}", p.dim(), q.dim())));
    }
    let mut support = p.support.clone();
    let mut pp = p.probs.clone();
    let mut qq = vec![0.0; pp.len()];
    for (x, &w) in q.support.iter().zip(&q.probs) {
        match support.iter().position(|s| s == x) {
            Some(i) => qq[i] += w,
            None => {
                support.push(x.clone());
                pp.push(0.0);
                qq.push(w);
            }
        }
    }
    Ok((support, pp, qq))
}

/// `KL(p‖q)` in nats; `+∞` when `p` puts mass where `q` has none.
pub fn kl(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    let (_, a, b) = merged(p, q)?;
    Ok(kl_vec(&a, &b))
}

pub fn kl_vec(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * (a / b).ln();
        }
    }
    s.max(0.0)
}

/// `½·Σ|p − q|`.
pub fn tv(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    let (_, a, b) = merged(p, q)?;
    Ok(tv_vec(&a, &b))
}

pub fn tv_vec(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact `W1` under the Euclidean metric: the CDF formula in one dimension,
/// min-cost flow otherwise.
pub fn w1(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Contract(format!("dimension {} vs {}", p.dim(), q.dim())));
    }
    if p.dim() == 1 {
        Ok(w1_line(p, q))
    } else {
        w1_transport(p, q, euclidean)
    }
}

/// `∫ |F_p − F_q|` for scalar supports.
pub fn w1_line(p: &DiscreteDistribution, q: &DiscreteDistribution) -> f64 {
    let mut events: Vec<(f64, f64)> = p
        .support
        .iter()
        .zip(&p.probs)
        .map(|(x, &w)| (x[0], w))
        .chain(q.support.iter().zip(&q.probs).map(|(x, &w)| (x[0], -w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for k in 0..events.len() {
        cdf_gap += events[k].1;
        if k + 1 < events.len() {
            total += cdf_gap.abs() * (events[k + 1].0 - events[k].0);
        }
    }
    total
}

/// Exact optimal transport cost by successive shortest paths on the
/// bipartite support graph.
pub fn w1_transport(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    metric: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    let (n, m) = (p.len(), q.len());
    if n > MAX_TRANSPORT_ATOMS || m > MAX_TRANSPORT_ATOMS {
        return Err(Error::Contract(format!(
            "transport supports capped at {MAX_TRANSPORT_ATOMS} atoms, got {n} and {m}"
        )));
    }
    let cost: Vec<Vec<f64>> = p
        .support
        .iter()
        .map(|a| q.support.iter().map(|b| metric(a, b)).collect())
        .collect();
    Ok(min_cost_transport(&p.probs, &q.probs, &cost))
}

const FLOW_EPS: f64 = 1e-15;

/// Minimum of `Σ c_ij·f_ij` over couplings of `supply` and `demand`.
pub(crate) fn min_cost_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (n, m) = (supply.len(), demand.len());
    let mut flow = vec![vec![0.0; m]; n];
    let mut left = supply.to_vec();
    let mut need = demand.to_vec();
    // Nodes: 0..n sources, n..n+m sinks. Residual arcs: source→sink always
    // open; sink→source open while flow > 0.
    loop {
        let total_left: f64 = left.iter().sum();
        if total_left <= 1e-13 || need.iter().all(|&d| d <= FLOW_EPS) {
            break;
        }
        let mut dist = vec![f64::INFINITY; n + m];
        let mut prev = vec![usize::MAX; n + m];
        for i in 0..n {
            if left[i] > FLOW_EPS {
                dist[i] = 0.0;
            }
        }
        // Bellman-Ford; residual reverse arcs carry negative costs.
        for _ in 0..n + m {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..m {
                        let d = dist[i] + cost[i][j];
                        if d < dist[n + j] - 1e-15 {
                            dist[n + j] = d;
                            prev[n + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i][j] > FLOW_EPS {
                            let d = dist[n + j] - cost[i][j];
                            if d < dist[i] - 1e-15 {
                                dist[i] = d;
                                prev[i] = n + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..m)
            .filter(|&j| need[j] > FLOW_EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(j) = sink else { break };
        // Walk back to the source, collecting the bottleneck.
        let mut path = vec![n + j];
        let mut node = n + j;
        while prev[node] != usize::MAX {
            node = prev[node];
            path.push(node);
        }
        let src = *path.last().expect("non-empty path");
        let mut amount = left[src].min(need[j]);
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from >= n {
                // Reverse arc sink `from` → source `to` cancels flow.
                amount = amount.min(flow[to][from - n]);
            }
        }
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from < n {
                flow[from][to - n] += amount;
            } else {
                flow[to][from - n] -= amount;
            }
        }
        left[src] -= amount;
        need[j] -= amount;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += flow[i][j].max(0.0) * cost[i][j];
        }
    }
    total
}
