//! Second-order SCM task prior.
//!
//! A mechanism is a depth-`L` MLP over Gaussian exogenous causes. Observed
//! features are rotated, selected coordinates of the last hidden layer plus
//! Gaussian output noise; labels come from a separate coordinate block,
//! quantile-binned into `C` classes. The concatenated hidden states form the
//! latent `z` that drives the missingness gate.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::missingness::{GateConfig, Mask, ScoreGate};
use crate::seed::{self, TAG_DATA, TAG_GATE, TAG_MECHANISM, TAG_RETRY};
use crate::tensor::Tensor;

pub const MAX_RETRIES: u64 = 8;
pub const QUERY_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MechanismConfig {
    pub n_features: usize,
    pub class_range: (usize, usize),
    pub depth: usize,
    pub hidden: usize,
    /// Number of exogenous causes; defaults to `hidden`.
    pub n_causes: Option<usize>,
    /// Fixed activation, or `None` to draw one of tanh/identity/relu per task.
    pub activation: Option<Activation>,
    /// Bernoulli keep-probability for weights of layers 2..=L.
    pub keep_prob: f64,
    pub block_sparsify: bool,
    pub randomize_exogenous: bool,
    /// Output-noise scale range; scales are drawn log-uniformly.
    pub noise_range: (f64, f64),
    pub categorical_prob: f64,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self::desk(8)
    }
}

impl MechanismConfig {
    /// Desk-scale defaults for `d` features: `L = 3`, `H = max(C_max + 2d, 32)`.
    pub fn desk(d: usize) -> Self {
        let class_range = (2, 10);
        Self {
            n_features: d,
            class_range,
            depth: 3,
            hidden: (class_range.1 + 2 * d).max(32),
            n_causes: None,
            activation: None,
            keep_prob: 0.8,
            block_sparsify: true,
            randomize_exogenous: true,
            noise_range: (0.01, 0.3),
            categorical_prob: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.class_range;
        if self.n_features == 0 {
            return Err(Error::Config("n_features must be positive".into()));
        }
        if lo < 2 || hi < lo {
            return Err(Error::Config(format!("class range {lo}..={hi} must satisfy 2 <= lo <= hi")));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth {} < 2", self.depth)));
        }
        let need = hi + 2 * self.n_features;
        if self.hidden < need {
            return Err(Error::Config(format!(
                "hidden width {} < d_y + 2d = {need}",
                self.hidden
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep probability {} not in (0, 1]", self.keep_prob)));
        }
        let (a, b) = self.noise_range;
        if !(a > 0.0 && b >= a) {
            return Err(Error::Config(format!("noise range ({a}, {b}) must be positive and ordered")));
        }
        if !(0.0..=1.0).contains(&self.categorical_prob) {
            return Err(Error::Config("categorical probability outside [0, 1]".into()));
        }
        if self.n_causes == Some(0) {
            return Err(Error::Config("n_causes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    /// `weights[l]` is `fan_in × H`, already multiplied by its mask.
    pub weights: Vec<Tensor<f64>>,
    pub weight_masks: Vec<Tensor<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub rotation: Tensor<f64>,
    pub feature_coords: Vec<usize>,
    pub label_coords: Vec<usize>,
    pub noise_scales: Vec<f64>,
    pub exo_mean: Vec<f64>,
    pub exo_scale: Vec<f64>,
    pub activation: Activation,
    pub n_classes: usize,
    /// Level count for categorical features, `None` for continuous ones.
    pub categorical: Vec<Option<usize>>,
}

impl Mechanism {
    pub fn n_features(&self) -> usize {
        self.feature_coords.len()
    }

    pub fn hidden(&self) -> usize {
        self.rotation.rows()
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Column count of the latent representation `z`.
    pub fn latent_width(&self) -> usize {
        self.depth() * self.hidden()
    }

    pub fn n_causes(&self) -> usize {
        self.weights[0].rows()
    }

    /// Fraction of weights zeroed by masks in layers 2..=L.
    pub fn masked_fraction(&self) -> f64 {
        let (zeros, total) = self.weight_masks[1..].iter().fold((0usize, 0usize), |(z, t), m| {
            (z + m.data().iter().filter(|&&v| v == 0.0).count(), t + m.len())
        });
        zeros as f64 / total.max(1) as f64
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Haar-distributed orthogonal matrix from the QR factorization of a
/// Gaussian matrix (modified Gram-Schmidt, sign-corrected by `diag(R)`).
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut cols: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| gaussian(rng)).collect()).collect();
    for j in 0..n {
        for k in 0..j {
            let dot: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
            let (head, tail) = cols.split_at_mut(j);
            for i in 0..n {
                tail[0][i] -= dot * head[k][i];
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut cols[j] {
            *v /= norm;
        }
    }
    let mut q = Tensor::zeros(&[n, n]);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q.set(i, j, v);
        }
    }
    q
}

pub fn sample_mechanism(config: &MechanismConfig, seed: u64) -> Result<Mechanism> {
    config.validate()?;
    let mut rng = seed::stream(seed, &[TAG_MECHANISM]);
    let h = config.hidden;
    let d = config.n_features;
    let causes = config.n_causes.unwrap_or(h);
    let activation = config.activation.unwrap_or_else(|| {
        [Activation::Tanh, Activation::Identity, Activation::Relu][rng.random_range(0..3)]
    });
    let n_classes = rng.random_range(config.class_range.0..=config.class_range.1);

    let mut weights = Vec::with_capacity(config.depth);
    let mut weight_masks = Vec::with_capacity(config.depth);
    let mut biases = Vec::with_capacity(config.depth);
    for layer in 0..config.depth {
        let fan_in = if layer == 0 { causes } else { h };
        let std = 1.0 / (fan_in as f64).sqrt();
        let mut w = Tensor::new(
            vec![fan_in, h],
            (0..fan_in * h).map(|_| gaussian(&mut rng) * std).collect(),
        )?;
        let mut mask = Tensor::full(&[fan_in, h], 1.0);
        if layer > 0 {
            for m in mask.data_mut() {
                if rng.random::<f64>() >= config.keep_prob {
                    *m = 0.0;
                }
            }
            if config.block_sparsify {
                block_sparsify(&mut mask, &mut rng);
            }
        }
        for (wv, &mv) in w.data_mut().iter_mut().zip(mask.data()) {
            *wv *= mv;
        }
        weights.push(w);
        weight_masks.push(mask);
        biases.push((0..h).map(|_| 0.1 * gaussian(&mut rng)).collect());
    }

    let rotation = random_orthogonal(h, &mut rng);
    let mut coords: Vec<usize> = (0..h).collect();
    coords.shuffle(&mut rng);
    let feature_coords = coords[..d].to_vec();
    let label_coords = coords[d..d + n_classes].to_vec();

    let (lo, hi) = config.noise_range;
    let noise_scales = (0..d)
        .map(|_| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp())
        .collect();
    let (exo_mean, exo_scale) = if config.randomize_exogenous {
        (
            (0..causes).map(|_| gaussian(&mut rng)).collect(),
            (0..causes)
                .map(|_| (0.5f64.ln() + rng.random::<f64>() * (4f64).ln()).exp())
                .collect(),
        )
    } else {
        (vec![0.0; causes], vec![1.0; causes])
    };
    let categorical = (0..d)
        .map(|_| (rng.random::<f64>() < config.categorical_prob).then(|| rng.random_range(2..=5)))
        .collect();

    Ok(Mechanism {
        weights,
        weight_masks,
        biases,
        rotation,
        feature_coords,
        label_coords,
        noise_scales,
        exo_mean,
        exo_scale,
        activation,
        n_classes,
        categorical,
    })
}

/// Zeroes each cell of a 4×4 block grid with probability 1/4.
fn block_sparsify(mask: &mut Tensor<f64>, rng: &mut impl Rng) {
    let (r, c) = (mask.rows(), mask.cols());
    let (br, bc) = (r.div_ceil(4), c.div_ceil(4));
    for bi in 0..4 {
        for bj in 0..4 {
            if rng.random::<f64>() < 0.25 {
                for i in bi * br..((bi + 1) * br).min(r) {
                    for j in bj * bc..((bj + 1) * bc).min(c) {
                        mask.set(i, j, 0.0);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompleteData {
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
    pub z: Tensor<f64>,
}

/// Ranks of `scores` (0-based, ties broken by index).
fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Equal-mass quantile bins: the element of rank `r` goes to `r·k/n`.
pub fn quantile_bins(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    ranks(scores).into_iter().map(|r| r * k / n).collect()
}

fn forward_once(m: &Mechanism, n: usize, rng: &mut impl Rng) -> Result<CompleteData> {
    let causes = m.n_causes();
    let h = m.hidden();
    let mut u = Tensor::zeros(&[n, causes]);
    for i in 0..n {
        for j in 0..causes {
            u.set(i, j, m.exo_mean[j] + m.exo_scale[j] * gaussian(rng));
        }
    }
    let mut hidden = Vec::with_capacity(m.depth());
    let mut cur = u;
    for (w, b) in m.weights.iter().zip(&m.biases) {
        let mut next = cur.matmul(w)?;
        for i in 0..n {
            for (v, &bb) in next.row_mut(i).iter_mut().zip(b) {
                *v = m.activation.apply(*v + bb);
            }
        }
        hidden.push(next.clone());
        cur = next;
    }
    let width = m.depth() * h;
    let mut z = Tensor::zeros(&[n, width]);
    for (l, hl) in hidden.iter().enumerate() {
        for i in 0..n {
            z.row_mut(i)[l * h..(l + 1) * h].copy_from_slice(hl.row(i));
        }
    }
    let rotated = cur.matmul(&m.rotation)?;
    let d = m.n_features();
    let mut x = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for (j, &c) in m.feature_coords.iter().enumerate() {
            x.set(i, j, rotated.at(i, c) + m.noise_scales[j] * gaussian(rng));
        }
    }
    let label_score: Vec<f64> = (0..n)
        .map(|i| m.label_coords.iter().map(|&c| rotated.at(i, c)).sum())
        .collect();
    if !x.is_finite() || !z.is_finite() || label_score.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mechanism forward pass".into()));
    }
    for (j, levels) in m.categorical.iter().enumerate() {
        if let Some(k) = *levels {
            let col: Vec<f64> = (0..n).map(|i| x.at(i, j)).collect();
            for (i, b) in quantile_bins(&col, k).into_iter().enumerate() {
                x.set(i, j, b as f64);
            }
        }
    }
    let y = quantile_bins(&label_score, m.n_classes);
    Ok(CompleteData { x, y, z })
}

/// Runs the mechanism on `n` fresh exogenous draws. Non-finite forward values
/// trigger up to [`MAX_RETRIES`] reseeded attempts.
pub fn generate_complete_data(m: &Mechanism, n: usize, seed: u64) -> Result<CompleteData> {
    if n < 2 {
        return Err(Error::Contract(format!("need n >= 2 rows, got {n}")));
    }
    let mut last = None;
    for attempt in 0..=MAX_RETRIES {
        let s = if attempt == 0 {
            seed::derive(seed, &[TAG_DATA])
        } else {
            seed::derive(seed, &[TAG_DATA, TAG_RETRY, attempt])
        };
        match forward_once(m, n, &mut seed::rng(s)) {
            Ok(data) => return Ok(data),
            Err(e @ Error::NonFinite(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::NonFinite("mechanism forward pass".into())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub mechanism: MechanismConfig,
    /// Missingness gate; `None` disables masking.
    pub gate: Option<GateConfig>,
    /// Optimization step used for the gate's warmup schedule.
    pub gate_step: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            mechanism: MechanismConfig::default(),
            gate: Some(GateConfig::default()),
            gate_step: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub mechanism: Mechanism,
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
    pub z: Tensor<f64>,
    pub mask: Mask,
    /// Rows `..split` are context, `split..` are queries.
    pub split: usize,
}

impl SyntheticTask {
    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.mechanism.n_classes
    }
}

/// `⌊0.95·n⌋`, kept inside `(0, n)`.
pub fn split_index(n: usize) -> usize {
    (((1.0 - QUERY_FRACTION) * n as f64).floor() as usize).clamp(1, n - 1)
}

pub fn sample_task(config: &TaskConfig, n: usize, seed: u64) -> Result<SyntheticTask> {
    let mechanism = sample_mechanism(&config.mechanism, seed)?;
    let data = generate_complete_data(&mechanism, n, seed)?;
    let d = mechanism.n_features();
    let mask = match &config.gate {
        Some(gate_cfg) => {
            let gate = ScoreGate::sample(gate_cfg, mechanism.latent_width(), d, seed::derive(seed, &[TAG_GATE]))?;
            gate.apply(&data.z, config.gate_step, &[], seed::derive(seed, &[TAG_GATE, 1]))?
        }
        None => Mask::zeros(n, d, "none", seed),
    };
    Ok(SyntheticTask {
        mechanism,
        x: data.x,
        y: data.y,
        z: data.z,
        mask,
        split: split_index(n),
    })
}

/// Tasks for one batch: task `i` uses seed `base_seed + i`.
pub fn sample_batch(config: &TaskConfig, n: usize, base_seed: u64, count: usize) -> Result<Vec<SyntheticTask>> {
    use rayon::prelude::*;
    (0..count as u64)
        .into_par_iter()
        .map(|i| sample_task(config, n, base_seed.wrapping_add(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> MechanismConfig {
        MechanismConfig {
            n_features: 4,
            class_range: (2, 4),
            depth: 2,
            hidden: 12,
            ..MechanismConfig::desk(4)
        }
    }

    #[test]
    fn width_rule_is_enforced_not_adjusted() {
        let mut c = small_config();
        c.hidden = 11;
        assert!(matches!(sample_mechanism(&c, 0), Err(Error::Config(_))));
        c.hidden = 12;
        assert!(sample_mechanism(&c, 0).is_ok());
        c.depth = 1;
        assert!(matches!(sample_mechanism(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn full_keep_probability_zeroes_nothing_without_block_sparsify() {
        let mut c = small_config();
        c.keep_prob = 1.0;
        c.block_sparsify = false;
        let m = sample_mechanism(&c, 3).unwrap();
        assert_eq!(m.masked_fraction(), 0.0);
        assert!(m.weights.iter().all(|w| w.data().iter().all(|&v| v != 0.0)));
    }

    #[test]
    fn first_layer_is_never_masked() {
        let mut c = small_config();
        c.keep_prob = 0.1;
        let m = sample_mechanism(&c, 9).unwrap();
        assert!(m.weight_masks[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mechanism_is_deterministic_under_seed() {
        let c = small_config();
        assert_eq!(sample_mechanism(&c, 42).unwrap(), sample_mechanism(&c, 42).unwrap());
        assert_ne!(sample_mechanism(&c, 42).unwrap(), sample_mechanism(&c, 43).unwrap());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let q = random_orthogonal(7, &mut seed::rng(1));
        let qtq = q.transpose().matmul(&q).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.at(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_indices_are_distinct_and_in_range() {
        let m = sample_mechanism(&small_config(), 5).unwrap();
        let mut all: Vec<usize> = m.feature_coords.iter().chain(&m.label_coords).copied().collect();
        assert!(all.iter().all(|&c| c < m.hidden()));
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), m.n_features() + m.n_classes);
        assert!(m.noise_scales.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn latent_has_depth_times_width_columns() {
        let m = sample_mechanism(&small_config(), 5).unwrap();
        let data = generate_complete_data(&m, 30, 1).unwrap();
        assert_eq!(data.z.shape(), &[30, 2 * 12]);
        assert_eq!(data.x.shape(), &[30, 4]);
        assert!(data.y.iter().all(|&y| y < m.n_classes));
    }

    #[test]
    fn too_few_rows_is_rejected() {
        let m = sample_mechanism(&small_config(), 5).unwrap();
        assert!(generate_complete_data(&m, 1, 0).is_err());
    }

    #[test]
    fn overflowing_mechanism_exhausts_retries() {
        let mut m = sample_mechanism(&small_config(), 5).unwrap();
        m.activation = Activation::Identity;
        for w in &mut m.weights {
            for v in w.data_mut() {
                *v *= 1e200;
            }
        }
        assert!(matches!(generate_complete_data(&m, 10, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn split_follows_query_fraction() {
        assert_eq!(split_index(1152), 1094);
        assert_eq!(1152 - split_index(1152), 58);
        assert_eq!(split_index(2), 1);
    }

    #[test]
    fn quantile_bins_are_balanced() {
        let s: Vec<f64> = (0..10).map(|i| (i * 7 % 10) as f64).collect();
        let b = quantile_bins(&s, 2);
        assert_eq!(b.iter().filter(|&&v| v == 0).count(), 5);
    }
}
