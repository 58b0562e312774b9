//! Pre-training on a stream of synthetic tasks.
//!
//! Every batch is a pure function of `(seed, step)`: task `i` of step `s`
//! is drawn from `derive(seed, [TRAIN, s, i])`. Per-task gradients may be
//! computed on any number of threads; they are summed in task order, so the
//! loss curve does not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, LrSchedule, OptimizerState};
use crate::params::ParamStore;
use crate::pfn::PfnModel;
use crate::scalar::Scalar;
use crate::scm::{sample_task, TaskConfig};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub cfm_weight: f64,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Decay of the mean-teacher copy used by the distillation term.
    pub teacher_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            warmup_epochs: 20,
            min_lr: 1e-8,
            weight_decay: 0.0,
            batch_size: 64,
            cfm_weight: 0.1,
            steps: 1000,
            steps_per_epoch: 10,
            seed: 0,
            teacher_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.weight_decay < 0.0 || self.cfm_weight < 0.0 {
            return Err(Error::Config("learning rates and loss weights must be non-negative (lr > 0)".into()));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch size and steps per epoch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.teacher_decay) {
            return Err(Error::Config("teacher decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            min_lr: self.min_lr,
            total_epochs: self.steps.div_ceil(self.steps_per_epoch),
        }
    }
}

/// A source of training episodes. `step` is passed so priors with a
/// curriculum (the gate warmup) can follow training progress.
pub trait TaskPrior: Sync {
    fn sample(&self, seed: u64, step: usize) -> Result<Episode>;
}

impl<F> TaskPrior for F
where
    F: Fn(u64, usize) -> Result<Episode> + Sync,
{
    fn sample(&self, seed: u64, step: usize) -> Result<Episode> {
        self(seed, step)
    }
}

/// Synthetic tasks from the SCM prior, with the gate warmup following the
/// training step.
#[derive(Clone, Debug)]
pub struct ScmPrior {
    pub task: TaskConfig,
    pub rows: usize,
}

impl TaskPrior for ScmPrior {
    fn sample(&self, seed: u64, step: usize) -> Result<Episode> {
        let mut cfg = self.task.clone();
        cfg.gate_step = step;
        Episode::from_task(&sample_task(&cfg, self.rows, seed)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub cfm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    Aborted { step: usize, reason: String },
}

pub struct TrainRun<T> {
    /// Parameters after the last finite step.
    pub model: PfnModel<T>,
    pub log: Vec<StepLog>,
    pub status: TrainStatus,
    pub steps_done: usize,
}

struct TaskGrad<T> {
    grads: Vec<Tensor<T>>,
    ce: f64,
    cfm: f64,
    loss: f64,
}

fn task_gradient<T: Scalar>(
    model: &PfnModel<T>,
    teacher: Option<&ParamStore<T>>,
    ep: &Episode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TaskGrad<T>> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, ep)?;
    let ce = model.ce_loss(&mut tape, &fwd, ep)?;
    let ce_val = tape.value(ce).data()[0].to_f64_lossy();
    let mut loss = ce;
    let mut cfm_val = 0.0;
    if model.flow.is_some() && cfg.cfm_weight > 0.0 {
        let mut rng = seed::stream(seed, &[seed::TAG_FLOW]);
        if let Some(cfm) = model.cfm_loss(&mut tape, fwd.states, ep, &mut rng)? {
            cfm_val = tape.value(cfm).data()[0].to_f64_lossy();
            let w = tape.scale(cfm, T::of(cfg.cfm_weight));
            loss = tape.add(loss, w)?;
        }
    }
    if let Some(tp) = teacher {
        let t_model = PfnModel {
            config: model.config.clone(),
            flow: model.flow.clone(),
            params: tp.clone(),
        };
        let probs = t_model.predict(ep)?;
        let targets = probs.data().iter().map(|&p| T::of(p)).collect();
        let kd = tape.soft_cross_entropy(fwd.logits, targets, ep.n_classes)?;
        let w = tape.scale(kd, T::of(model.config.distill_weight));
        loss = tape.add(loss, w)?;
    }
    let loss_val = tape.value(loss).data()[0].to_f64_lossy();
    let grads = tape.backward(loss, &model.params)?;
    Ok(TaskGrad {
        grads,
        ce: ce_val,
        cfm: cfm_val,
        loss: loss_val,
    })
}

/// Mean loss and gradient over one batch, reduced in task order.
pub fn batch_gradient<T: Scalar>(
    model: &PfnModel<T>,
    teacher: Option<&ParamStore<T>>,
    prior: &dyn TaskPrior,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Vec<Tensor<T>>, StepLog)> {
    let per_task: Vec<Result<TaskGrad<T>>> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive(cfg.seed, &[seed::TAG_TRAIN, step as u64, i as u64]);
            let ep = prior.sample(s, step)?;
            task_gradient(model, teacher, &ep, cfg, s)
        })
        .collect();
    let mut total: Option<Vec<Tensor<T>>> = None;
    let (mut loss, mut ce, mut cfm) = (0.0, 0.0, 0.0);
    for r in per_task {
        let g = r?;
        loss += g.loss;
        ce += g.ce;
        cfm += g.cfm;
        total = Some(match total {
            None => g.grads,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(&g.grads) {
                    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                acc
            }
        });
    }
    let b = cfg.batch_size as f64;
    let scale = T::of(1.0 / b);
    let grads = total
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.scale(scale))
        .collect();
    Ok((
        grads,
        StepLog {
            step,
            lr: 0.0,
            loss: loss / b,
            ce: ce / b,
            cfm: cfm / b,
        },
    ))
}

/// Runs `cfg.steps` optimizer steps. A non-finite loss or gradient stops the
/// run and returns the parameters from before the failing step.
pub fn train<T: Scalar>(mut model: PfnModel<T>, prior: &dyn TaskPrior, cfg: &TrainConfig) -> Result<TrainRun<T>> {
    cfg.validate()?;
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(&model.params, adam, cfg.schedule());
    let distill = model.config.distill_weight > 0.0;
    let mut teacher = distill.then(|| model.params.clone());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (grads, mut entry) = batch_gradient(&model, teacher.as_ref(), prior, cfg, step)?;
        if !entry.loss.is_finite() {
            return Ok(TrainRun {
                model,
                log,
                status: TrainStatus::Aborted {
                    step,
                    reason: format!("non-finite loss {}", entry.loss),
                },
                steps_done: step,
            });
        }
        let before = model.params.clone();
        match opt.step(&mut model.params, &grads, step / cfg.steps_per_epoch) {
            Ok(lr) => entry.lr = lr,
            Err(e) => {
                model.params = before;
                return Ok(TrainRun {
                    model,
                    log,
                    status: TrainStatus::Aborted {
                        step,
                        reason: e.to_string(),
                    },
                    steps_done: step,
                });
            }
        }
        if let Some(tp) = teacher.as_mut() {
            let d = T::of(cfg.teacher_decay);
            for i in 0..tp.len() {
                let src = model.params.tensor(i).data().to_vec();
                for (t, s) in tp.tensor_mut(i).data_mut().iter_mut().zip(src) {
                    *t = d * *t + (T::one() - d) * s;
                }
            }
        }
        log.push(entry);
    }
    Ok(TrainRun {
        model,
        log,
        status: TrainStatus::Completed,
        steps_done: cfg.steps,
    })
}

/// Mean query cross-entropy over episodes drawn with `seeds`.
pub fn evaluate_ce<T: Scalar>(model: &PfnModel<T>, prior: &dyn TaskPrior, seeds: &[u64], step: usize) -> Result<f64> {
    let mut total = 0.0;
    for &s in seeds {
        let ep = prior.sample(s, step)?;
        let y = ep
            .y_q
            .as_ref()
            .ok_or_else(|| Error::Contract("evaluation needs query labels".into()))?;
        let p = model.predict(&ep)?;
        total += y.iter().enumerate().map(|(i, &c)| -p.at(i, c).ln()).sum::<f64>() / y.len() as f64;
    }
    Ok(total / seeds.len().max(1) as f64)
}
