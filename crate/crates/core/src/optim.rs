//! Adam with bias correction and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warmup over `warmup_epochs`, then cosine decay to `min_lr` at
/// `total_epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            warmup_epochs: 0,
            min_lr: lr,
            total_epochs: 0,
        }
    }

    /// Effective rate for `epoch` (0-based): `base·(epoch+1)/warmup` during
    /// warmup, cosine afterwards, clamped to `[min_lr, base_lr]`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let lr = if epoch < self.warmup_epochs {
            self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else if self.total_epochs <= self.warmup_epochs {
            self.base_lr
        } else {
            let span = (self.total_epochs - self.warmup_epochs) as f64;
            let progress = ((epoch - self.warmup_epochs) as f64 / span).min(1.0);
            self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        lr.clamp(self.min_lr.min(self.base_lr), self.base_lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig, schedule: LrSchedule) -> Self {
        let zeros = |p: &ParamStore<T>| (0..p.len()).map(|i| Tensor::zeros(p.tensor(i).shape())).collect();
        Self {
            config,
            schedule,
            step: 0,
            first: zeros(params),
            second: zeros(params),
        }
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.first[i]
    }

    /// Applies one Adam update at the learning rate scheduled for `epoch`.
    /// Returns that learning rate.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], epoch: usize) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::dim(
                "optimizer_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(Error::dim("optimizer_step", format!("gradient shape for {}", params.name(i))));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at element {pos} is {}",
                    params.name(i),
                    g.data()[pos]
                )));
            }
        }
        self.step += 1;
        let lr = self.schedule.lr(epoch);
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::of(1.0 - c.beta2.powf(self.step as f64));
        let (lr_t, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for e in 0..p.len() {
                let gi = g.data()[e] + wd * p[e];
                m[e] = b1 * m[e] + (T::one() - b1) * gi;
                v[e] = b2 * v[e] + (T::one() - b2) * gi * gi;
                let mhat = m[e] / bc1;
                let vhat = v[e] / bc2;
                p[e] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    #[test]
    fn first_warmup_epoch_uses_one_twentieth() {
        let s = LrSchedule {
            base_lr: 3e-5,
            warmup_epochs: 20,
            min_lr: 1e-8,
            total_epochs: 200,
        };
        assert!((s.lr(0) - 3e-5 / 20.0).abs() < 1e-20);
        assert!((s.lr(19) - 3e-5).abs() < 1e-20);
        assert!((s.lr(200) - 1e-8).abs() < 1e-20);
        for e in 0..400 {
            let lr = s.lr(e);
            assert!((1e-8..=3e-5).contains(&lr));
        }
    }

    #[test]
    fn cosine_phase_is_monotone() {
        let s = LrSchedule {
            base_lr: 1e-3,
            warmup_epochs: 5,
            min_lr: 1e-8,
            total_epochs: 50,
        };
        for e in 5..60 {
            assert!(s.lr(e + 1) <= s.lr(e));
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params() {
        let mut p = one_param(0.5);
        let mut opt = OptimizerState::new(&p, AdamConfig::default(), LrSchedule::constant(0.1));
        opt.step(&mut p, &[Tensor::scalar(0.0)], 0).unwrap();
        assert_eq!(p.tensor(0).data()[0], 0.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = one_param(0.5);
        let mut opt = OptimizerState::new(&p, AdamConfig::default(), LrSchedule::constant(0.1));
        let err = opt.step(&mut p, &[Tensor::scalar(f64::NAN)], 0).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn constant_gradient_moves_downhill_monotonically() {
        // f(w) = w on a descending direction: constant gradient 1.
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(&p, AdamConfig::default(), LrSchedule::constant(1e-2));
        let mut prev = 1.0;
        for _ in 0..200 {
            opt.step(&mut p, &[Tensor::scalar(1.0)], 0).unwrap();
            let w = p.tensor(0).data()[0];
            assert!(w < prev);
            prev = w;
        }
        // Bias-corrected Adam takes steps of exactly lr under a constant gradient.
        assert!((prev - (1.0 - 200.0 * 1e-2)).abs() < 1e-6);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = w²/2, gradient w.
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(&p, AdamConfig::default(), LrSchedule::constant(1e-2));
        for _ in 0..10_000 {
            let w = p.tensor(0).data()[0];
            opt.step(&mut p, &[Tensor::scalar(w)], 0).unwrap();
        }
        assert!(p.tensor(0).data()[0].abs() <= 1e-3, "w = {}", p.tensor(0).data()[0]);
    }
}
