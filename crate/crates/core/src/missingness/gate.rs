//! Randomized score-and-quantile gate.
//!
//! A freshly sampled convolutional score network maps each latent row `z_i`
//! to per-layer, per-feature scores. Feature `j` reads the score of a
//! uniformly drawn layer `ℓ_j`, draws `α_j ~ U[α_min, α_max(t)]` and is
//! missing where its score is at or below the empirical `α_j`-quantile.
//!
//! With propagation on, the first-pass indicators are fed back through one
//! extra score layer (`s' = s + λ·tanh(B·m)`, `B` with zero diagonal) and
//! re-thresholded, so indicators depend on other indicators. With it off the
//! gate has no indicator-to-indicator path at all.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_label_cols, Mask};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub alpha_min: f64,
    pub alpha_max_start: f64,
    pub alpha_max_end: f64,
    pub warmup_steps: usize,
    pub kernel_size: usize,
    pub channels: usize,
    /// Draw the score layer per feature; otherwise every feature uses the last.
    pub per_feature_layer: bool,
    /// Mask-to-mask feedback; off is the X→M-only ablation.
    pub propagation: bool,
    pub propagation_weight: f64,
    /// Overrides the per-feature quantile draw.
    pub fixed_alpha: Option<f64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            alpha_min: 0.0,
            alpha_max_start: 0.3,
            alpha_max_end: 0.8,
            warmup_steps: 1000,
            kernel_size: 7,
            channels: 4,
            per_feature_layer: true,
            propagation: true,
            propagation_weight: 1.0,
            fixed_alpha: None,
        }
    }
}

impl GateConfig {
    /// The X→M-only ablation of this configuration.
    pub fn without_propagation(mut self) -> Self {
        self.propagation = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let hi = self.alpha_max_start.max(self.alpha_max_end);
        let lo = self.alpha_max_start.min(self.alpha_max_end);
        if !(0.0 <= self.alpha_min && self.alpha_min <= lo && hi < 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= alpha_min ({}) <= alpha_max(t) < 1 (range {lo}..{hi})",
                self.alpha_min
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.channels == 0 {
            return Err(Error::Config("score network needs at least one channel".into()));
        }
        if let Some(a) = self.fixed_alpha {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("fixed alpha {a} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Linear warmup of the upper quantile level over `warmup_steps`.
pub fn alpha_max(cfg: &GateConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.alpha_max_end;
    }
    let frac = step.min(cfg.warmup_steps) as f64 / cfg.warmup_steps as f64;
    cfg.alpha_max_start + (cfg.alpha_max_end - cfg.alpha_max_start) * frac
}

/// Empirical `alpha`-quantile: the `⌈alpha·n⌉`-th smallest score, or `-∞`
/// when that count is zero. `1[s ≤ τ]` then marks exactly `⌈alpha·n⌉`
/// entries when scores are distinct.
pub fn quantile_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("quantile of an empty sample".into()));
    }
    let n = scores.len();
    let k = ((alpha * n as f64).ceil() as usize).min(n);
    if k == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

const SCORE_LAYERS: usize = 2;

/// One sampled gate: score network, readouts, layer choices and feedback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGate {
    pub config: GateConfig,
    pub latent_width: usize,
    pub n_features: usize,
    /// `[channels][kernel]`.
    conv1: Vec<f64>,
    bias1: Vec<f64>,
    /// `[channels][channels][kernel]`.
    conv2: Vec<f64>,
    bias2: Vec<f64>,
    /// Per layer: `n_features × (channels·latent_width)`.
    readout: Vec<Tensor<f64>>,
    pub layer_choice: Vec<usize>,
    /// `n_features × n_features`, zero diagonal.
    feedback: Tensor<f64>,
}

fn reflect(p: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut q = p.rem_euclid(period);
    if q >= len as isize {
        q = period - q;
    }
    q as usize
}

impl ScoreGate {
    pub fn sample(cfg: &GateConfig, latent_width: usize, n_features: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if latent_width == 0 {
            return Err(Error::Contract("latent representation has no columns".into()));
        }
        let mut rng = seed::rng(seed);
        let mut normal = |scale: f64, count: usize| -> Vec<f64> {
            (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let (c, k) = (cfg.channels, cfg.kernel_size);
        let conv1 = normal(1.0 / (k as f64).sqrt(), c * k);
        let bias1 = normal(0.1, c);
        let conv2 = normal(1.0 / ((c * k) as f64).sqrt(), c * c * k);
        let bias2 = normal(0.1, c);
        let fan = c * latent_width;
        let readout = (0..SCORE_LAYERS)
            .map(|_| Tensor::new(vec![n_features, fan], normal(1.0 / (fan as f64).sqrt(), n_features * fan)))
            .collect::<Result<Vec<_>>>()?;
        let mut feedback = Tensor::new(
            vec![n_features, n_features],
            normal(1.0 / (n_features.max(1) as f64).sqrt(), n_features * n_features),
        )?;
        for j in 0..n_features {
            feedback.set(j, j, 0.0);
        }
        let layer_choice = (0..n_features)
            .map(|_| {
                if cfg.per_feature_layer {
                    rng.random_range(0..SCORE_LAYERS)
                } else {
                    SCORE_LAYERS - 1
                }
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            latent_width,
            n_features,
            conv1,
            bias1,
            conv2,
            bias2,
            readout,
            layer_choice,
            feedback,
        })
    }

    /// Per-feature scores `n × d` from the chosen score layers.
    pub fn scores(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        if z.cols() != self.latent_width {
            return Err(Error::dim(
                "score_quantile_gate",
                format!("latent has {} columns, gate expects {}", z.cols(), self.latent_width),
            ));
        }
        let (n, len) = (z.rows(), self.latent_width);
        let (c, k) = (self.config.channels, self.config.kernel_size);
        let half = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, self.n_features]);
        let mut h1 = vec![0.0; c * len];
        let mut h2 = vec![0.0; c * len];
        for i in 0..n {
            let x = z.row(i);
            for ch in 0..c {
                for p in 0..len {
                    let mut acc = self.bias1[ch];
                    for t in 0..k {
                        acc += self.conv1[ch * k + t] * x[reflect(p as isize + t as isize - half, len)];
                    }
                    h1[ch * len + p] = acc.tanh();
                }
            }
            for ch in 0..c {
                for p in 0..len {
                    let mut acc = self.bias2[ch];
                    for cin in 0..c {
                        let w = &self.conv2[(ch * c + cin) * k..(ch * c + cin + 1) * k];
                        for (t, &wt) in w.iter().enumerate() {
                            acc += wt * h1[cin * len + reflect(p as isize + t as isize - half, len)];
                        }
                    }
                    h2[ch * len + p] = acc.tanh();
                }
            }
            for j in 0..self.n_features {
                let layer = self.layer_choice[j];
                let h = if layer == 0 { &h1 } else { &h2 };
                let r = self.readout[layer].row(j);
                out.set(i, j, r.iter().zip(h.iter()).map(|(a, b)| a * b).sum());
            }
        }
        Ok(out)
    }

    fn threshold_columns(scores: &Tensor<f64>, alphas: &[f64], label_cols: &[usize], mask: &mut Mask) -> Result<()> {
        let n = scores.rows();
        for (j, &alpha) in alphas.iter().enumerate() {
            let col: Vec<f64> = (0..n).map(|i| scores.at(i, j)).collect();
            let tau = quantile_threshold(&col, alpha)?;
            let forced = label_cols.contains(&j);
            for (i, &s) in col.iter().enumerate() {
                mask.set(i, j, !forced && s <= tau);
            }
        }
        Ok(())
    }

    /// Draws quantile levels for `step` and thresholds the scores of `z`.
    pub fn apply(&self, z: &Tensor<f64>, step: usize, label_cols: &[usize], seed: u64) -> Result<Mask> {
        if z.rows() == 0 {
            return Err(Error::Contract("gate needs at least one sample".into()));
        }
        check_label_cols(self.n_features, label_cols)?;
        let mut rng = seed::rng(seed);
        let cfg = &self.config;
        let amax = alpha_max(cfg, step);
        let alphas: Vec<f64> = (0..self.n_features)
            .map(|_| match cfg.fixed_alpha {
                Some(a) => a,
                None => cfg.alpha_min + rng.random::<f64>() * (amax - cfg.alpha_min),
            })
            .collect();
        let scores = self.scores(z)?;
        let n = z.rows();
        let mechanism = if cfg.propagation { "gate" } else { "gate-nsm" };
        let mut mask = Mask::zeros(n, self.n_features, mechanism, seed);
        Self::threshold_columns(&scores, &alphas, label_cols, &mut mask)?;

        if cfg.propagation {
            let mut second = scores.clone();
            for i in 0..n {
                for j in 0..self.n_features {
                    let drive: f64 = (0..self.n_features)
                        .map(|l| self.feedback.at(j, l) * f64::from(mask.row(i)[l]))
                        .sum();
                    second.set(i, j, scores.at(i, j) + cfg.propagation_weight * drive.tanh());
                }
            }
            Self::threshold_columns(&second, &alphas, label_cols, &mut mask)?;
        }
        mask.provenance.params = serde_json::json!({
            "step": step,
            "alpha_max": amax,
            "alphas": alphas,
            "layer_choice": self.layer_choice,
            "propagation": cfg.propagation,
        });
        Ok(mask)
    }
}

/// Samples a gate for this task and applies it once.
pub fn score_quantile_gate(z: &Tensor<f64>, step: usize, cfg: &GateConfig, n_features: usize, label_cols: &[usize], seed: u64) -> Result<Mask> {
    let gate = ScoreGate::sample(cfg, z.cols(), n_features, seed::derive(seed, &[0]))?;
    gate.apply(z, step, label_cols, seed::derive(seed, &[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(n: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seed::rng(seed);
        Tensor::new(
            vec![n, w],
            (0..n * w).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn warmup_endpoints() {
        let cfg = GateConfig::default();
        assert_eq!(alpha_max(&cfg, 0), 0.3);
        assert_eq!(alpha_max(&cfg, 1000), 0.8);
        assert_eq!(alpha_max(&cfg, 5000), 0.8);
        assert!((alpha_max(&cfg, 500) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn zero_quantile_masks_nothing() {
        let cfg = GateConfig {
            alpha_min: 0.0,
            alpha_max_start: 0.0,
            alpha_max_end: 0.0,
            ..GateConfig::default()
        };
        let z = latent(50, 12, 1);
        let m = score_quantile_gate(&z, 0, &cfg, 4, &[], 3).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn threshold_counts_ceil_alpha_n() {
        let scores: Vec<f64> = (0..10).map(|i| ((i * 37) % 10) as f64).collect();
        for (alpha, expect) in [(0.0, 0), (0.05, 1), (0.5, 5), (0.51, 6), (0.99, 10)] {
            let tau = quantile_threshold(&scores, alpha).unwrap();
            assert_eq!(scores.iter().filter(|&&s| s <= tau).count(), expect, "alpha {alpha}");
        }
        assert!(quantile_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn fixed_half_quantile_gives_half_per_feature() {
        for propagation in [false, true] {
            let cfg = GateConfig {
                fixed_alpha: Some(0.5),
                propagation,
                ..GateConfig::default()
            };
            let z = latent(101, 16, 5);
            let m = score_quantile_gate(&z, 0, &cfg, 5, &[], 8).unwrap();
            for j in 0..5 {
                assert!((m.column_rate(j) - 0.5).abs() <= 1.0 / 101.0);
            }
        }
    }

    #[test]
    fn label_columns_stay_observed() {
        let cfg = GateConfig {
            fixed_alpha: Some(0.7),
            ..GateConfig::default()
        };
        let z = latent(40, 10, 2);
        let m = score_quantile_gate(&z, 2000, &cfg, 4, &[1, 3], 4).unwrap();
        assert_eq!(m.column_count(1), 0);
        assert_eq!(m.column_count(3), 0);
        assert!(m.column_count(0) > 0);
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig { kernel_size: 6, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { alpha_max_end: 1.0, ..GateConfig::default() }.validate().is_err());
        assert!(GateConfig { alpha_min: 0.5, ..GateConfig::default() }.validate().is_err());
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-3, 5), 3);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(4, 1), 0);
    }

    #[test]
    fn latent_width_mismatch_is_rejected() {
        let gate = ScoreGate::sample(&GateConfig::default(), 8, 3, 1).unwrap();
        assert!(gate.apply(&latent(5, 9, 1), 0, &[], 1).is_err());
    }

    fn draws(cfg: &GateConfig) -> Vec<Mask> {
        let z = latent(12, 10, 21);
        let gate = ScoreGate::sample(cfg, 10, 4, 5).unwrap();
        (0..crate::missingness::MIN_PROBE_DRAWS as u64)
            .map(|s| gate.apply(&z, 0, &[], s).unwrap())
            .collect()
    }

    #[test]
    fn ablation_removes_indicator_dependence() {
        use crate::missingness::mask_dependence_probe;
        let off = mask_dependence_probe(&draws(&GateConfig::default().without_propagation()), 199, 1).unwrap();
        assert!(off.min_p_value().unwrap() >= 0.01, "{off:?}");
        let on = GateConfig {
            propagation_weight: 10.0,
            ..GateConfig::default()
        };
        let on = mask_dependence_probe(&draws(&on), 199, 1).unwrap();
        assert!(on.min_p_value().unwrap() < 0.01, "{on:?}");
    }
}
