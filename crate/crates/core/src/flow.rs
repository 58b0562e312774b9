//! Conditional flow-matching head for the missing-value posterior.
//!
//! Each query row contributes one token per feature. A token sees its noisy
//! state only where the entry is missing and its observed value otherwise,
//! so training on states that are noisy everywhere matches sampling with
//! observed entries clamped. Tokens attend within their row and
//! cross-attend to the backbone states of the context and of their own
//! query row.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnMask, Tape, Var};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pfn::{attention_block, ffn_block, init_attention, init_ffn, param, PfnConfig, PfnModel};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    #[default]
    Rk4,
}

impl std::str::FromStr for Solver {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Solver::Euler),
            "rk4" => Ok(Solver::Rk4),
            other => Err(format!("unknown solver `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layers: usize,
    pub solver: Solver,
    pub steps: usize,
    pub samples: usize,
    /// Detach backbone states before the head reads them.
    pub freeze_backbone: bool,
    pub divergence_limit: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            solver: Solver::Rk4,
            steps: 32,
            samples: 16,
            freeze_backbone: false,
            divergence_limit: 1e6,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.steps == 0 || self.samples == 0 {
            return Err(Error::Config("flow layers, steps and samples must be ≥ 1".into()));
        }
        if !(self.divergence_limit > 0.0) {
            return Err(Error::Config("divergence limit must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_flow_params<T: Scalar>(store: &mut ParamStore<T>, pfn: &PfnConfig, cfg: &FlowConfig, rng: &mut seed::Rng) {
    let (w, f) = (pfn.width, pfn.ffn);
    store.insert_normal("flow.noisy", &[1, w], 1, rng);
    store.insert_normal("flow.observed", &[1, w], 1, rng);
    store.insert_normal("flow.feature", &[pfn.max_features, w], 1, rng);
    store.insert_normal("flow.missing", &[1, w], 1, rng);
    store.insert_normal("flow.time_w", &[w, w], w, rng);
    store.insert_const("flow.time_b", &[1, w], 0.0);
    for l in 0..cfg.layers {
        init_attention(store, &format!("flow{l}.self"), w, rng);
        init_attention(store, &format!("flow{l}.cross"), w, rng);
        init_ffn(store, &format!("flow{l}.ffn"), w, f, rng);
    }
    store.insert_const("flow.out_ln_g", &[1, w], 1.0);
    store.insert_const("flow.out_ln_b", &[1, w], 0.0);
    store.insert_normal("flow.out_w", &[w, 1], w, rng);
    store.insert_const("flow.out_b", &[1, 1], 0.0);
}

/// Sinusoidal embedding of `t ∈ [0, 1]`, frequencies from 1 to ~1000.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let freq = (1000f64.ln() * k as f64 / half as f64).exp();
        out[k] = (t * freq).sin();
        out[k + half] = (t * freq).cos();
    }
    out
}

/// Straight-line interpolant `x_t = (1−t)·x0 + t·x1` and its velocity
/// `x1 − x0`, with one `t` per row.
pub fn interpolate(x0: &Tensor<f64>, x1: &Tensor<f64>, t: &[f64]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if x0.shape() != x1.shape() || t.len() != x0.rows() {
        return Err(Error::dim("interpolate", format!("{:?} vs {:?}, {} times", x0.shape(), x1.shape(), t.len())));
    }
    let mut xt = x0.clone();
    let mut u = x0.clone();
    for i in 0..x0.rows() {
        for j in 0..x0.cols() {
            let (a, b) = (x0.at(i, j), x1.at(i, j));
            xt.set(i, j, (1.0 - t[i]) * a + t[i] * b);
            u.set(i, j, b - a);
        }
    }
    Ok((xt, u))
}

/// CFM objective: squared velocity error summed over masked entries, averaged
/// over rows. Returns 0 when nothing is masked.
pub fn cfm_objective(v: &Tensor<f64>, u: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    if v.shape() != u.shape() || v.shape() != mask.shape() {
        return Err(Error::dim("cfm_objective", format!("{:?} {:?} {:?}", v.shape(), u.shape(), mask.shape())));
    }
    let sse: f64 = v
        .data()
        .iter()
        .zip(u.data())
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.5)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum();
    Ok(sse / v.rows().max(1) as f64)
}

/// Integrates `dx/dt = v(x, t)` from 0 to 1. Entries where `mask` is 0 are
/// clamped to `observed` at every step.
pub fn integrate(
    x0: &Tensor<f64>,
    mask: &Tensor<f64>,
    observed: &Tensor<f64>,
    solver: Solver,
    steps: usize,
    limit: f64,
    mut velocity: impl FnMut(&Tensor<f64>, f64) -> Result<Tensor<f64>>,
) -> Result<Tensor<f64>> {
    if steps == 0 {
        return Err(Error::Config("solver needs at least one step".into()));
    }
    if x0.shape() != mask.shape() || x0.shape() != observed.shape() {
        return Err(Error::dim("integrate", format!("{:?} {:?} {:?}", x0.shape(), mask.shape(), observed.shape())));
    }
    let clamp = |x: &mut Tensor<f64>| {
        for ((v, &m), &o) in x.data_mut().iter_mut().zip(mask.data()).zip(observed.data()) {
            if m < 0.5 {
                *v = o;
            }
        }
    };
    let axpy = |x: &Tensor<f64>, k: &Tensor<f64>, h: f64| -> Result<Tensor<f64>> {
        let mut y = x.zip_map(k, "integrate", |a, b| a + h * b)?;
        clamp(&mut y);
        Ok(y)
    };
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    clamp(&mut x);
    for s in 0..steps {
        let t = s as f64 * dt;
        x = match solver {
            Solver::Euler => {
                let k = velocity(&x, t)?;
                axpy(&x, &k, dt)?
            }
            Solver::Rk4 => {
                let k1 = velocity(&x, t)?;
                let k2 = velocity(&axpy(&x, &k1, 0.5 * dt)?, t + 0.5 * dt)?;
                let k3 = velocity(&axpy(&x, &k2, 0.5 * dt)?, t + 0.5 * dt)?;
                let k4 = velocity(&axpy(&x, &k3, dt)?, t + dt)?;
                let mut y = x.clone();
                for (i, v) in y.data_mut().iter_mut().enumerate() {
                    *v += dt / 6.0 * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
                }
                clamp(&mut y);
                y
            }
        };
        let magnitude = x.max_abs();
        if !(magnitude <= limit) {
            return Err(Error::Divergence {
                t: t + dt,
                magnitude,
            });
        }
    }
    Ok(x)
}

/// Posterior draws and their per-entry summary, in the raw data scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputation {
    pub completed: Tensor<f64>,
    pub spread: Tensor<f64>,
    /// One `n_query × d` completion per draw.
    pub samples: Vec<Tensor<f64>>,
}

fn standard_normal(rows: usize, cols: usize, rng: &mut seed::Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

impl<T: Scalar> PfnModel<T> {
    fn flow_config(&self) -> Result<&FlowConfig> {
        self.flow
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no flow head".into()))
    }

    /// Velocity for `R = xt.rows()` rows. `keys` holds `n_ctx` context states
    /// followed by one state per row.
    pub fn velocity(
        &self,
        tape: &mut Tape<T>,
        keys: Var,
        n_ctx: usize,
        observed: &Tensor<f64>,
        mask: &Tensor<f64>,
        xt: &Tensor<f64>,
        t: &[f64],
    ) -> Result<Var> {
        let fc = self.flow_config()?;
        let cfg = &self.config;
        let (r, d) = (xt.rows(), xt.cols());
        if observed.shape() != xt.shape() || mask.shape() != xt.shape() || t.len() != r {
            return Err(Error::dim("velocity", format!("state {:?}, {} times", xt.shape(), t.len())));
        }
        if tape.shape(keys)[0] != n_ctx + r || d > cfg.max_features || d == 0 {
            return Err(Error::dim("velocity", format!("{} keys for {n_ctx} context and {r} rows", tape.shape(keys)[0])));
        }
        let g = r * d;
        let w = cfg.width;
        let mut noisy = Tensor::zeros(&[g, 1]);
        let mut obs = Tensor::zeros(&[g, 1]);
        let mut miss = Tensor::zeros(&[g, 1]);
        let mut feat = Tensor::zeros(&[g, cfg.max_features]);
        let mut temb = Tensor::zeros(&[g, w]);
        for i in 0..r {
            let te = time_embedding(t[i], w);
            for j in 0..d {
                let k = i * d + j;
                let m = mask.at(i, j) > 0.5;
                if m {
                    noisy.set(k, 0, T::of(xt.at(i, j)));
                    miss.set(k, 0, T::one());
                } else {
                    obs.set(k, 0, T::of(observed.at(i, j)));
                }
                feat.set(k, j, T::one());
                temb.row_mut(k).iter_mut().zip(&te).for_each(|(o, &v)| *o = T::of(v));
            }
        }
        let p = &self.params;
        let eps = T::of(cfg.ln_eps);
        let parts = [
            (noisy, "flow.noisy"),
            (obs, "flow.observed"),
            (miss, "flow.missing"),
            (feat, "flow.feature"),
            (temb, "flow.time_w"),
        ];
        let mut h: Option<Var> = None;
        for (c, name) in parts {
            let cv = tape.constant(c);
            let wv = param(tape, p, name)?;
            let term = tape.matmul(cv, wv)?;
            h = Some(match h {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let tb = param(tape, p, "flow.time_b")?;
        let mut h = tape.add_row(h.expect("non-empty"), tb)?;
        let keys = if fc.freeze_backbone { tape.detach(keys) } else { keys };
        for l in 0..fc.layers {
            h = attention_block(tape, p, &format!("flow{l}.self"), h, None, cfg.heads, AttnMask::Blocks { size: d }, eps)?;
            h = attention_block(
                tape,
                p,
                &format!("flow{l}.cross"),
                h,
                Some(keys),
                cfg.heads,
                AttnMask::ContextPlusGroup { n_ctx, group: d },
                eps,
            )?;
            h = ffn_block(tape, p, &format!("flow{l}.ffn"), h, cfg.activation, eps)?;
        }
        let lg = param(tape, p, "flow.out_ln_g")?;
        let lb = param(tape, p, "flow.out_ln_b")?;
        let h = tape.layer_norm(h, lg, lb, eps)?;
        let ow = param(tape, p, "flow.out_w")?;
        let ob = param(tape, p, "flow.out_b")?;
        let v = tape.matmul(h, ow)?;
        tape.add_row(v, ob)
    }

    /// CFM loss on the episode's query rows. Returns `None` when no query
    /// entry is missing.
    pub fn cfm_loss(&self, tape: &mut Tape<T>, states: Var, ep: &Episode, rng: &mut impl Rng) -> Result<Option<Var>> {
        let x1 = ep
            .x_q_full
            .as_ref()
            .ok_or_else(|| Error::Contract("flow matching needs complete query values".into()))?;
        let (n_q, d) = (ep.n_queries(), ep.n_features());
        let t: Vec<f64> = (0..n_q).map(|_| rng.random::<f64>()).collect();
        let x0 = Tensor::new(vec![n_q, d], (0..n_q * d).map(|_| StandardNormal.sample(rng)).collect())?;
        if ep.n_query_missing() == 0 {
            return Ok(None);
        }
        let (xt, u) = interpolate(&x0, x1, &t)?;
        let v = self.velocity(tape, states, ep.n_context(), &ep.x_q, &ep.m_q, &xt, &t)?;
        let mask: Vec<bool> = ep.m_q.data().iter().map(|&m| m > 0.5).collect();
        let target = u.reshape(&[n_q * d, 1])?.cast::<T>();
        Ok(Some(tape.masked_sse(v, &target, &mask, T::of(n_q as f64))?))
    }

    /// Draws `samples` completions of each query row by integrating the
    /// learned velocity field. Output is in the raw data scale.
    pub fn sample_posterior(&self, ep: &Episode, samples: usize, seed: u64) -> Result<Vec<Tensor<f64>>> {
        let fc = self.flow_config()?.clone();
        if samples == 0 {
            return Err(Error::Config("need at least one posterior sample".into()));
        }
        let (n_ctx, n_q, d) = (ep.n_context(), ep.n_queries(), ep.n_features());
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, ep)?;
        let states = tape.value(fwd.states).clone();
        let mut key_rows: Vec<usize> = (0..n_ctx).collect();
        for _ in 0..samples {
            key_rows.extend(n_ctx..n_ctx + n_q);
        }
        let keys = states.select_rows(&key_rows);
        let rows: Vec<usize> = (0..samples).flat_map(|_| 0..n_q).collect();
        let observed = ep.x_q.select_rows(&rows);
        let mask = ep.m_q.select_rows(&rows);
        let mut rng = seed::rng(seed);
        let x0 = standard_normal(rows.len(), d, &mut rng);
        let x = integrate(&x0, &mask, &observed, fc.solver, fc.steps, fc.divergence_limit, |xt, t| {
            let mut tape = Tape::new();
            let k = tape.constant(keys.clone());
            let tt = vec![t; xt.rows()];
            let v = self.velocity(&mut tape, k, n_ctx, &observed, &mask, xt, &tt)?;
            tape.value(v).cast::<f64>().reshape(&[xt.rows(), d])
        })?;
        Ok((0..samples)
            .map(|s| {
                let mut out = x.select_rows(&((s * n_q)..((s + 1) * n_q)).collect::<Vec<_>>());
                for i in 0..n_q {
                    for j in 0..d {
                        out.set(i, j, ep.scaler.inverse(j, out.at(i, j)));
                    }
                }
                out
            })
            .collect())
    }

    /// Posterior-mean imputation of the query rows. `raw` is the original
    /// query matrix; its observed entries are copied through unchanged.
    pub fn impute(&self, ep: &Episode, raw: &Tensor<f64>, samples: usize, seed: u64) -> Result<Imputation> {
        if raw.shape() != ep.x_q.shape() {
            return Err(Error::dim("impute", format!("raw {:?} vs episode {:?}", raw.shape(), ep.x_q.shape())));
        }
        let (n, d) = (raw.rows(), raw.cols());
        let mut completed = raw.clone();
        let mut spread = Tensor::zeros(&[n, d]);
        if ep.n_query_missing() == 0 {
            return Ok(Imputation {
                completed,
                spread,
                samples: Vec::new(),
            });
        }
        let draws = self.sample_posterior(ep, samples, seed)?;
        let s = draws.len() as f64;
        for i in 0..n {
            for j in 0..d {
                if ep.m_q.at(i, j) < 0.5 {
                    continue;
                }
                let mean = draws.iter().map(|x| x.at(i, j)).sum::<f64>() / s;
                let var = draws.iter().map(|x| (x.at(i, j) - mean).powi(2)).sum::<f64>() / s;
                completed.set(i, j, mean);
                spread.set(i, j, var.sqrt());
            }
        }
        Ok(Imputation {
            completed,
            spread,
            samples: draws,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::missingness::{mcar_mask, Mask};

    /// Straight-line transport `x0 ↦ μ + σ·x0` written as a field in `x`.
    fn straight_field(mu: f64, sigma: f64) -> impl Fn(f64, f64) -> f64 {
        move |x, t| mu + (sigma - 1.0) * (x - t * mu) / (1.0 + t * (sigma - 1.0))
    }

    /// Marginal field of the independent-coupling interpolant.
    fn gaussian_field(mu: f64, sigma: f64) -> impl Fn(f64, f64) -> f64 {
        move |x, t| {
            let var = (1.0 - t).powi(2) + t * t * sigma * sigma;
            mu + (t * sigma * sigma - (1.0 - t)) / var * (x - t * mu)
        }
    }

    fn all_missing(n: usize, d: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[n, d], 1.0), Tensor::zeros(&[n, d]))
    }

    #[test]
    fn zero_field_returns_the_noise() {
        let mut rng = seed::rng(1);
        let x0 = standard_normal(5, 2, &mut rng);
        let (m, o) = all_missing(5, 2);
        for steps in [1, 7, 32] {
            let x = integrate(&x0, &m, &o, Solver::Euler, steps, 1e6, |x, _| Ok(Tensor::zeros(x.shape()))).unwrap();
            assert_eq!(x, x0);
        }
    }

    #[test]
    fn constant_field_shifts_by_c() {
        let mut rng = seed::rng(2);
        let x0 = standard_normal(4, 3, &mut rng);
        let (m, o) = all_missing(4, 3);
        for solver in [Solver::Euler, Solver::Rk4] {
            let x = integrate(&x0, &m, &o, solver, 10, 1e6, |x, _| Ok(Tensor::full(x.shape(), 0.75))).unwrap();
            for (a, b) in x.data().iter().zip(x0.data()) {
                assert!((a - b - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observed_entries_are_clamped() {
        let x0 = Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let o = Tensor::from_rows(&[vec![0.0, 2.5]]).unwrap();
        let x = integrate(&x0, &m, &o, Solver::Rk4, 4, 1e6, |x, _| Ok(Tensor::full(x.shape(), 1.0))).unwrap();
        assert_eq!(x.at(0, 1), 2.5);
        assert!((x.at(0, 0) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let x0 = Tensor::full(&[1, 1], 1.0);
        let (m, o) = all_missing(1, 1);
        let r = integrate(&x0, &m, &o, Solver::Euler, 8, 1e6, |x, _| Ok(x.scale(1e4)));
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn oracle_transport_matches_target_moments() {
        let (mu, sigma) = (1.5, 0.5);
        let n = 10_000;
        let x0 = standard_normal(n, 1, &mut seed::rng(3));
        let (m, o) = all_missing(n, 1);
        for f in [Box::new(gaussian_field(mu, sigma)) as Box<dyn Fn(f64, f64) -> f64>, Box::new(straight_field(mu, sigma))] {
            let x = integrate(&x0, &m, &o, Solver::Rk4, 32, 1e6, |x, t| Ok(x.map(|v| f(v, t)))).unwrap();
            let mean = x.sum() / n as f64;
            let sd = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!((mean - mu).abs() < 0.05, "mean {mean}");
            assert!((sd - sigma).abs() < 0.05, "sd {sd}");
        }
    }

    #[test]
    fn euler_and_rk4_agree_on_oracle_field() {
        let f = straight_field(-0.5, 2.0);
        let mut rng = seed::rng(4);
        let x0 = standard_normal(50, 1, &mut rng);
        let (m, o) = all_missing(50, 1);
        let e = integrate(&x0, &m, &o, Solver::Euler, 1024, 1e6, |x, t| Ok(x.map(|v| f(v, t)))).unwrap();
        let r = integrate(&x0, &m, &o, Solver::Rk4, 32, 1e6, |x, t| Ok(x.map(|v| f(v, t)))).unwrap();
        let gap = e.sub(&r).unwrap().max_abs();
        assert!(gap <= 1e-3, "gap {gap}");
    }

    #[test]
    fn oracle_velocity_has_zero_loss() {
        let mut rng = seed::rng(5);
        let x0 = standard_normal(6, 3, &mut rng);
        let x1 = standard_normal(6, 3, &mut rng);
        let t: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let (_, u) = interpolate(&x0, &x1, &t).unwrap();
        let mask = Tensor::full(&[6, 3], 1.0);
        assert_eq!(cfm_objective(&u, &u, &mask).unwrap(), 0.0);
        let (_, u0) = interpolate(&x0, &x0, &t).unwrap();
        assert_eq!(cfm_objective(&Tensor::zeros(&[6, 3]), &u0, &mask).unwrap(), 0.0);
        assert_eq!(cfm_objective(&x1, &u, &Tensor::zeros(&[6, 3])).unwrap(), 0.0);
    }

    fn flow_model() -> PfnModel<f64> {
        let cfg = PfnConfig {
            width: 8,
            layers: 1,
            heads: 2,
            ffn: 8,
            max_classes: 2,
            max_features: 3,
            ..PfnConfig::desk()
        };
        PfnModel::new(
            cfg,
            Some(FlowConfig {
                steps: 4,
                ..FlowConfig::default()
            }),
            7,
        )
        .unwrap()
    }

    fn flow_episode() -> (Episode, Tensor<f64>) {
        let mut rng = seed::rng(8);
        let xc = standard_normal(6, 3, &mut rng);
        let xq = standard_normal(3, 3, &mut rng);
        let mc = mcar_mask(6, 3, 0.2, 1, &[]).unwrap();
        let mut mq = Mask::zeros(3, 3, "test", 0);
        mq.set(0, 1, true);
        mq.set(2, 0, true);
        mq.set(2, 2, true);
        let ep = Episode::new(&xc, &mc, &[0, 1, 0, 1, 1, 0], &xq, &mq, 2)
            .unwrap()
            .with_query_truth(&xq)
            .unwrap();
        (ep, xq)
    }

    #[test]
    fn imputation_passes_observed_entries_through() {
        let model = flow_model();
        let (ep, raw) = flow_episode();
        let imp = model.impute(&ep, &raw, 3, 11).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if ep.m_q.at(i, j) < 0.5 {
                    assert_eq!(imp.completed.at(i, j).to_bits(), raw.at(i, j).to_bits());
                    assert_eq!(imp.spread.at(i, j), 0.0);
                }
            }
        }
        assert!(imp.spread.at(0, 1) > 0.0);
        let one = model.impute(&ep, &raw, 1, 11).unwrap();
        assert_eq!(one.completed.at(2, 2), one.samples[0].at(2, 2));
    }

    #[test]
    fn fully_observed_rows_are_identity() {
        let model = flow_model();
        let (mut ep, raw) = flow_episode();
        ep.m_q = Tensor::zeros(&[3, 3]);
        let imp = model.impute(&ep, &raw, 4, 1).unwrap();
        assert_eq!(imp.completed, raw);
    }

    #[test]
    fn sampling_is_seeded() {
        let model = flow_model();
        let (ep, _) = flow_episode();
        let a = model.sample_posterior(&ep, 2, 5).unwrap();
        let b = model.sample_posterior(&ep, 2, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].at(0, 1), a[1].at(0, 1));
    }

    #[test]
    fn cfm_loss_is_skipped_without_missing_entries() {
        let model = flow_model();
        let (mut ep, _) = flow_episode();
        ep.m_q = Tensor::zeros(&[3, 3]);
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &ep).unwrap();
        assert!(model.cfm_loss(&mut tape, f.states, &ep, &mut seed::rng(0)).unwrap().is_none());
    }
}
