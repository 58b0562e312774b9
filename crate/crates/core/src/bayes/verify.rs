//! Numerical certificates for the risk decomposition and the approximation
//! bounds, on exactly enumerable instances.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dist::{entropy, euclidean, kl_vec, merged, tv_vec, w1, DiscreteDistribution};
use super::prior::{rows_to_episode, DiscretePrior, ObsRow};
use crate::error::{Error, Result};
use crate::pfn::PfnModel;
use crate::scalar::Scalar;
use crate::seed;

/// Slack for floating-point comparisons in the bound checks.
pub const BOUND_SLACK: f64 = 1e-12;

/// Anything that maps a labelled context and unlabeled queries to class
/// probabilities.
pub trait Predictor: Sync {
    fn predict(&self, context: &[ObsRow], queries: &[ObsRow], n_classes: usize) -> Result<Vec<Vec<f64>>>;
}

pub struct ExactPredictor<'a>(pub &'a DiscretePrior);

impl Predictor for ExactPredictor<'_> {
    fn predict(&self, context: &[ObsRow], queries: &[ObsRow], _: usize) -> Result<Vec<Vec<f64>>> {
        queries.iter().map(|q| self.0.ppd(context, q)).collect()
    }
}

pub struct UniformPredictor(pub usize);

impl Predictor for UniformPredictor {
    fn predict(&self, _: &[ObsRow], queries: &[ObsRow], _: usize) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0 / self.0 as f64; self.0]; queries.len()])
    }
}

impl<T: Scalar> Predictor for PfnModel<T> {
    fn predict(&self, context: &[ObsRow], queries: &[ObsRow], n_classes: usize) -> Result<Vec<Vec<f64>>> {
        let unlabeled: Vec<ObsRow> = queries.iter().map(ObsRow::unlabeled).collect();
        let ep = rows_to_episode(context, &unlabeled, n_classes)?;
        let p = PfnModel::predict(self, &ep)?;
        Ok((0..p.rows()).map(|i| p.row(i).iter().map(|v| v.to_f64_lossy()).collect()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub context_size: usize,
    pub contexts: usize,
    pub queries: usize,
    pub cross_entropy: f64,
    pub bayes_entropy: f64,
    pub expected_kl: f64,
    pub max_conditional_kl: f64,
    pub identity_gap: f64,
    pub holds: bool,
}

/// Enumerates every ordered labelled context of `context_size` rows and
/// every unlabeled query. The cross-entropy is summed directly over the
/// joint `P(D, q, y)`; entropy and KL come from the exact conditionals.
pub fn verify_pfn_risk_decomposition(
    prior: &DiscretePrior,
    predictor: &dyn Predictor,
    context_size: usize,
) -> Result<RiskReport> {
    let labeled = prior.labeled_space();
    let queries = prior.observation_space();
    let c = prior.n_classes();
    let mut contexts: Vec<Vec<ObsRow>> = vec![Vec::new()];
    for _ in 0..context_size {
        contexts = contexts
            .into_iter()
            .flat_map(|ctx| {
                labeled.iter().map(move |r| {
                    let mut next = ctx.clone();
                    next.push(r.clone());
                    next
                })
            })
            .collect();
    }
    // Per-task row probabilities for the query space, cached.
    let q_probs: Vec<Vec<Vec<f64>>> = prior
        .tasks
        .iter()
        .map(|t| {
            queries
                .iter()
                .map(|q| (0..c).map(|y| t.row_prob(&ObsRow::new(q.values.clone(), Some(y)))).collect())
                .collect()
        })
        .collect();
    let parts: Vec<[f64; 4]> = contexts
        .par_iter()
        .map(|ctx| -> Result<[f64; 4]> {
            let ctx_lik: Vec<f64> = prior
                .tasks
                .iter()
                .zip(&prior.weights)
                .map(|(t, &w)| w * ctx.iter().map(|r| t.row_prob(r)).product::<f64>())
                .collect();
            if ctx_lik.iter().all(|&l| l == 0.0) {
                return Ok([0.0; 4]);
            }
            let pred = predictor.predict(ctx, &queries, c)?;
            let (mut ce, mut h, mut kl, mut max_kl) = (0.0, 0.0, 0.0, 0.0f64);
            for (qi, q) in queries.iter().enumerate() {
                let joint: Vec<f64> = (0..c)
                    .map(|y| ctx_lik.iter().enumerate().map(|(t, l)| l * q_probs[t][qi][y]).sum())
                    .collect();
                let p_dq: f64 = joint.iter().sum();
                if p_dq == 0.0 {
                    continue;
                }
                let r = &pred[qi];
                for y in 0..c {
                    if joint[y] > 0.0 {
                        ce -= joint[y] * r[y].ln();
                    }
                }
                let exact = prior.ppd(ctx, q)?;
                let k = kl_vec(&exact, r);
                h += p_dq * entropy(&exact);
                kl += p_dq * k;
                max_kl = max_kl.max(k);
            }
            Ok([ce, h, kl, max_kl])
        })
        .collect::<Result<_>>()?;
    let sum = |i: usize| parts.iter().map(|p| p[i]).sum::<f64>();
    let (ce, h, kl) = (sum(0), sum(1), sum(2));
    let max_kl = parts.iter().map(|p| p[3]).fold(0.0, f64::max);
    let gap = (ce - h - kl).abs();
    Ok(RiskReport {
        context_size,
        contexts: contexts.len(),
        queries: queries.len(),
        cross_entropy: ce,
        bayes_entropy: h,
        expected_kl: kl,
        max_conditional_kl: max_kl,
        identity_gap: gap,
        holds: gap <= 1e-9 && kl >= -BOUND_SLACK,
    })
}

/// Target functions with a known Lipschitz constant on a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetFn {
    Linear { w: Vec<f64>, b: f64 },
    /// `Σ a_i x_i² + b`.
    Quadratic { a: Vec<f64>, b: f64 },
    /// `amp · Σ sin(freq · x_i)`.
    Sine { amp: f64, freq: f64 },
}

impl TargetFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Self::Linear { w, b } => w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b,
            Self::Quadratic { a, b } => a.iter().zip(x).map(|(a, x)| a * x * x).sum::<f64>() + b,
            Self::Sine { amp, freq } => amp * x.iter().map(|v| (freq * v).sin()).sum::<f64>(),
        }
    }

    pub fn strictly_convex(&self) -> bool {
        matches!(self, Self::Quadratic { a, .. } if a.iter().all(|&v| v > 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostIntInstance {
    /// True posterior over the missing coordinates.
    pub mu: DiscreteDistribution,
    /// Approximate posterior.
    pub nu: DiscreteDistribution,
    pub target: TargetFn,
    pub lipschitz: f64,
    /// Predictor values at the support points of `nu`.
    pub predictor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenReport {
    pub mean_of_target: f64,
    pub target_of_mean: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostIntReport {
    pub truth: f64,
    pub estimate: f64,
    pub error: f64,
    pub w1: f64,
    pub eps_pred: f64,
    pub bound: f64,
    pub holds: bool,
    pub jensen: Option<JensenReport>,
}

/// Largest `|f(a) − f(b)| / ‖a − b‖` over pairs of `points`.
fn lipschitz_ratio(points: &[Vec<f64>], f: impl Fn(usize) -> f64) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in 0..i {
            let d = euclidean(&points[i], &points[j]);
            if d > 0.0 {
                best = best.max((f(i) - f(j)).abs() / d);
            }
        }
    }
    best
}

pub fn verify_posterior_integration_bound(inst: &PostIntInstance) -> Result<PostIntReport> {
    if inst.predictor.len() != inst.nu.len() {
        return Err(Error::dim("predictor", format!("{} values for {} atoms", inst.predictor.len(), inst.nu.len())));
    }
    let (points, _, _) = merged(&inst.mu, &inst.nu)?;
    let ratio = lipschitz_ratio(&points, |i| inst.target.eval(&points[i]));
    if ratio > inst.lipschitz * (1.0 + BOUND_SLACK) + BOUND_SLACK {
        return Err(Error::Contract(format!(
            "target has slope {ratio} on the support, above the supplied L = {}",
            inst.lipschitz
        )));
    }
    let truth = inst.mu.expect(|x| inst.target.eval(x));
    let estimate: f64 = inst.nu.probs.iter().zip(&inst.predictor).map(|(p, h)| p * h).sum();
    let eps_pred = inst
        .nu
        .support
        .iter()
        .zip(&inst.nu.probs)
        .zip(&inst.predictor)
        .map(|((x, p), h)| p * (h - inst.target.eval(x)))
        .sum::<f64>()
        .abs();
    let dist = w1(&inst.mu, &inst.nu)?;
    let error = (truth - estimate).abs();
    let bound = inst.lipschitz * dist + eps_pred;
    let degenerate = inst.mu.probs.iter().filter(|&&p| p > 0.0).count() < 2;
    let jensen = (inst.target.strictly_convex() && !degenerate).then(|| {
        let t_mean = inst.target.eval(&inst.mu.mean());
        JensenReport {
            mean_of_target: truth,
            target_of_mean: t_mean,
            gap: truth - t_mean,
        }
    });
    let jensen_ok = jensen.as_ref().map_or(true, |j| j.gap > 0.0);
    Ok(PostIntReport {
        truth,
        estimate,
        error,
        w1: dist,
        eps_pred,
        bound,
        holds: error <= bound + BOUND_SLACK && jensen_ok,
        jensen,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcedSameReport {
    pub tv_p0_p1: f64,
    pub lower_bound: f64,
    pub candidates: usize,
    pub best_max_tv: f64,
    pub best_candidate: Vec<f64>,
    pub midpoint_max_tv: f64,
    /// Smallest, over candidates, of the sign-function supremum of the
    /// larger mean discrepancy.
    pub min_sign_sup: f64,
    pub violations: usize,
    pub holds: bool,
}

/// Points of the probability simplex on `k` atoms with coordinates in
/// multiples of `1/resolution`.
pub fn simplex_grid(k: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for v in 0..=left {
            prefix.push(v);
            rec(k - 1, left - v, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, resolution, &mut Vec::new(), &mut out);
    out.into_iter()
        .map(|c| c.into_iter().map(|v| v as f64 / resolution as f64).collect())
        .collect()
}

fn sign_functions(k: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..1usize << k).map(move |bits| (0..k).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect())
}

fn mean_gap(p: &[f64], q: &[f64], f: &[f64]) -> f64 {
    p.iter().zip(q).zip(f).map(|((a, b), v)| (a - b) * v).sum::<f64>().abs()
}

/// Sweeps a common-fit candidate over a simplex grid plus the midpoint
/// mixture.
pub fn verify_forced_same_dist_bound(
    p0: &DiscreteDistribution,
    p1: &DiscreteDistribution,
    resolution: usize,
) -> Result<ForcedSameReport> {
    let (support, a, b) = merged(p0, p1)?;
    let k = support.len();
    if k > 12 {
        return Err(Error::Contract(format!("{k} atoms exceed the 12-atom sign enumeration")));
    }
    let tv01 = tv_vec(&a, &b);
    let bound = 0.5 * tv01;
    let signs: Vec<Vec<f64>> = sign_functions(k).collect();
    let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    let mut grid = simplex_grid(k, resolution);
    grid.push(mid.clone());
    let max_tv = |c: &[f64]| tv_vec(&a, c).max(tv_vec(&b, c));
    let mut best = (f64::INFINITY, Vec::new());
    let mut min_sign = f64::INFINITY;
    let mut violations = 0;
    for c in &grid {
        let m = max_tv(c);
        if m < bound - BOUND_SLACK {
            violations += 1;
        }
        let sup = signs
            .iter()
            .map(|f| mean_gap(&a, c, f).max(mean_gap(&b, c, f)))
            .fold(0.0, f64::max);
        if sup < tv01 - BOUND_SLACK {
            violations += 1;
        }
        min_sign = min_sign.min(sup);
        if m < best.0 {
            best = (m, c.clone());
        }
    }
    Ok(ForcedSameReport {
        tv_p0_p1: tv01,
        lower_bound: bound,
        candidates: grid.len(),
        best_max_tv: best.0,
        best_candidate: best.1,
        midpoint_max_tv: max_tv(&mid),
        min_sign_sup: min_sign,
        violations,
        holds: violations == 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTermInstance {
    /// Values of the missing coordinates.
    pub points: Vec<Vec<f64>>,
    /// True posterior over `points`.
    pub p_star: Vec<f64>,
    /// Learned posterior `G` over `points`.
    pub g: Vec<f64>,
    /// True conditional label distribution at each point.
    pub cond_star: Vec<Vec<f64>>,
    /// Learned conditional `H` at each point.
    pub cond_h: Vec<Vec<f64>>,
    pub lipschitz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTermReport {
    pub w1: f64,
    pub max_error: f64,
    pub max_eps_h: f64,
    /// Largest `error − (L_h·W1 + ε_H)` over sign functions.
    pub worst_slack: f64,
    pub test_functions: usize,
    pub holds: bool,
}

pub fn verify_two_term_budget(inst: &TwoTermInstance) -> Result<TwoTermReport> {
    let n = inst.points.len();
    if [inst.p_star.len(), inst.g.len(), inst.cond_star.len(), inst.cond_h.len()].iter().any(|&l| l != n) {
        return Err(Error::dim("two-term instance", "per-point vectors disagree in length"));
    }
    let c = inst.cond_star.first().map_or(0, Vec::len);
    if c == 0 || c > 12 || inst.cond_star.iter().chain(&inst.cond_h).any(|r| r.len() != c) {
        return Err(Error::Contract("conditionals need a common class count in 1..=12".into()));
    }
    // Lipschitz constant of x ↦ E_H φ over all ‖φ‖∞ ≤ 1 is the L1 slope of H.
    let mut slope = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            let d = euclidean(&inst.points[i], &inst.points[j]);
            let l1: f64 = inst.cond_h[i].iter().zip(&inst.cond_h[j]).map(|(a, b)| (a - b).abs()).sum();
            if d > 0.0 {
                slope = slope.max(l1 / d);
            }
        }
    }
    if slope > inst.lipschitz * (1.0 + BOUND_SLACK) + BOUND_SLACK {
        return Err(Error::Contract(format!("H has slope {slope}, above the supplied L_h = {}", inst.lipschitz)));
    }
    let g = DiscreteDistribution::new(inst.points.clone(), inst.g.clone())?;
    let p = DiscreteDistribution::new(inst.points.clone(), inst.p_star.clone())?;
    let dist = w1(&g, &p)?;
    let expect = |cond: &[f64], f: &[f64]| cond.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
    let (mut max_err, mut max_eps, mut worst) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    let mut count = 0;
    for f in sign_functions(c) {
        let hat: f64 = (0..n).map(|i| inst.g[i] * expect(&inst.cond_h[i], &f)).sum();
        let star: f64 = (0..n).map(|i| inst.p_star[i] * expect(&inst.cond_star[i], &f)).sum();
        let eps_h: f64 = (0..n)
            .map(|i| inst.p_star[i] * (expect(&inst.cond_h[i], &f) - expect(&inst.cond_star[i], &f)).abs())
            .sum();
        let err = (hat - star).abs();
        max_err = max_err.max(err);
        max_eps = max_eps.max(eps_h);
        worst = worst.max(err - (inst.lipschitz * dist + eps_h));
        count += 1;
    }
    Ok(TwoTermReport {
        w1: dist,
        max_error: max_err,
        max_eps_h: max_eps,
        worst_slack: worst,
        test_functions: count,
        holds: worst <= BOUND_SLACK,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinskerReport {
    pub sign_sup: f64,
    pub twice_tv: f64,
    pub sqrt_2kl: f64,
    pub holds: bool,
}

/// `sup_φ |E_R φ − E_S φ| ≤ 2·TV(R, S) ≤ √(2·KL(R‖S))`, with the supremum
/// over sign functions (where it is attained).
pub fn verify_pinsker(r: &[f64], s: &[f64]) -> Result<PinskerReport> {
    if r.len() != s.len() || r.is_empty() || r.len() > 16 {
        return Err(Error::Contract("Pinsker check needs equal-length vectors of 1..=16 atoms".into()));
    }
    let sup = sign_functions(r.len()).map(|f| mean_gap(r, s, &f)).fold(0.0, f64::max);
    let twice_tv = 2.0 * tv_vec(r, s);
    let sqrt_2kl = (2.0 * kl_vec(r, s)).sqrt();
    Ok(PinskerReport {
        sign_sup: sup,
        twice_tv,
        sqrt_2kl,
        holds: sup <= twice_tv + BOUND_SLACK && twice_tv <= sqrt_2kl + BOUND_SLACK,
    })
}

fn random_simplex(rng: &mut seed::Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|v| v / s).collect();
    let fix = 1.0 - p.iter().sum::<f64>();
    p[0] += fix;
    p
}

/// `n` distinct points on a 1/64 lattice in `[−2, 2]^dim`.
fn random_points(rng: &mut seed::Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let p: Vec<f64> = (0..dim).map(|_| (rng.random_range(-2.0f64..2.0) * 64.0).round() / 64.0).collect();
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Random post-int instance on `[−2, 2]^dim` with an analytic Lipschitz
/// constant for the target.
pub fn random_post_int_instance(seed: u64) -> Result<PostIntInstance> {
    let mut rng = seed::rng(seed);
    let dim = rng.random_range(1..=2);
    let mu_pts = { let n = rng.random_range(2..=6); random_points(&mut rng, n, dim) };
    let nu_pts = { let n = rng.random_range(1..=6); random_points(&mut rng, n, dim) };
    let mu_p = random_simplex(&mut rng, mu_pts.len());
    let nu_p = random_simplex(&mut rng, nu_pts.len());
    let mu = DiscreteDistribution::new(mu_pts, mu_p)?;
    let nu = DiscreteDistribution::new(nu_pts, nu_p)?;
    let root = (dim as f64).sqrt();
    let (target, lipschitz) = match rng.random_range(0..3) {
        0 => {
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let l = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            (TargetFn::Linear { w, b: rng.random_range(-1.0..1.0) }, l)
        }
        1 => {
            let a: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..1.5)).collect();
            // |∇| = 2‖a ⊙ x‖ ≤ 4‖a‖ on the box.
            let l = 4.0 * a.iter().map(|v| v * v).sum::<f64>().sqrt();
            (TargetFn::Quadratic { a, b: rng.random_range(-1.0..1.0) }, l)
        }
        _ => {
            let amp: f64 = rng.random_range(0.2..1.5);
            let freq: f64 = rng.random_range(0.5..3.0);
            (TargetFn::Sine { amp, freq }, amp * freq * root)
        }
    };
    let predictor = nu
        .support
        .iter()
        .map(|x| target.eval(x) + rng.random_range(-0.3..0.3))
        .collect();
    Ok(PostIntInstance {
        mu,
        nu,
        target,
        lipschitz,
        predictor,
    })
}

/// Random two-term instance: `H(y=c|x)` is an affine-in-`x` softmax-free
/// mixture so its L1 slope is known.
pub fn random_two_term_instance(seed: u64) -> Result<TwoTermInstance> {
    let mut rng = seed::rng(seed);
    let dim = rng.random_range(1..=2);
    let points = { let n = rng.random_range(2..=8); random_points(&mut rng, n, dim) };
    let n = points.len();
    let c = rng.random_range(2..=3);
    let p_star = random_simplex(&mut rng, n);
    let g = random_simplex(&mut rng, n);
    let cond_star: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, c)).collect();
    // H(x) = base + (x·w)·dir with Σ dir = 0 keeps rows summing to one; the
    // scale keeps entries inside [0, 1] on the box.
    let base = random_simplex(&mut rng, c);
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut dir: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = dir.iter().sum::<f64>() / c as f64;
    dir.iter_mut().for_each(|v| *v -= mean);
    let reach = 2.0 * w.iter().map(|v| v.abs()).sum::<f64>();
    let room = base
        .iter()
        .zip(&dir)
        .map(|(b, d)| if d.abs() > 0.0 { b.min(1.0 - b) / d.abs() } else { f64::INFINITY })
        .fold(f64::INFINITY, f64::min);
    let scale = if reach > 0.0 { room / reach * rng.random_range(0.1..1.0) } else { 0.0 };
    let cond_h: Vec<Vec<f64>> = points
        .iter()
        .map(|x| {
            let s = scale * w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let mut row: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| (b + s * d).clamp(0.0, 1.0)).collect();
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
            row
        })
        .collect();
    let l1_dir: f64 = dir.iter().map(|v| v.abs()).sum();
    let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(TwoTermInstance {
        points,
        p_star,
        g,
        cond_star,
        cond_h,
        lipschitz: scale * l1_dir * wnorm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessFailure {
    pub statement: String,
    pub seed: u64,
    pub instance: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessSummary {
    pub statement: String,
    pub instances: usize,
    pub violations: usize,
    pub failures: Vec<HarnessFailure>,
}

impl HarnessSummary {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn run_harness<I: Serialize + Send>(
    statement: &str,
    base: u64,
    instances: usize,
    make: impl Fn(u64) -> Result<I> + Sync,
    check: impl Fn(&I) -> Result<bool> + Sync,
) -> Result<HarnessSummary> {
    let results: Vec<Option<HarnessFailure>> = (0..instances as u64)
        .into_par_iter()
        .map(|i| -> Result<Option<HarnessFailure>> {
            let s = seed::derive(base, &[i]);
            let inst = make(s)?;
            Ok((!check(&inst)?).then(|| HarnessFailure {
                statement: statement.to_string(),
                seed: s,
                instance: serde_json::to_value(&inst).unwrap_or(serde_json::Value::Null),
            }))
        })
        .collect::<Result<_>>()?;
    let failures: Vec<HarnessFailure> = results.into_iter().flatten().collect();
    Ok(HarnessSummary {
        statement: statement.to_string(),
        instances,
        violations: failures.len(),
        failures,
    })
}

/// Runs every randomized bound check with `instances` seeded draws each.
pub fn theorem_harness(base: u64, instances: usize) -> Result<Vec<HarnessSummary>> {
    let post_int = run_harness("posterior-integration", seed::derive(base, &[1]), instances, random_post_int_instance, |i| {
        Ok(verify_posterior_integration_bound(i)?.holds)
    })?;
    let jensen = run_harness(
        "jensen-gap",
        seed::derive(base, &[2]),
        instances,
        |s| {
            let mut rng = seed::rng(s);
            let dim = rng.random_range(1..=2);
            let pts = { let n = rng.random_range(2..=6); random_points(&mut rng, n, dim) };
            let probs = random_simplex(&mut rng, pts.len());
            let a: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..2.0)).collect();
            let mu = DiscreteDistribution::new(pts, probs)?;
            let lipschitz = 4.0 * a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let target = TargetFn::Quadratic { a, b: 0.0 };
            let predictor = mu.support.iter().map(|x| target.eval(x)).collect();
            Ok(PostIntInstance {
                nu: mu.clone(),
                mu,
                target,
                lipschitz,
                predictor,
            })
        },
        |i| {
            let r = verify_posterior_integration_bound(i)?;
            Ok(r.holds && r.jensen.is_some_and(|j| j.gap > 0.0))
        },
    )?;
    let forced = run_harness(
        "forced-same-distribution",
        seed::derive(base, &[3]),
        instances,
        |s| {
            let mut rng = seed::rng(s);
            let k = rng.random_range(2..=4);
            let pts: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64]).collect();
            let p0 = DiscreteDistribution::new(pts.clone(), random_simplex(&mut rng, k))?;
            let p1 = DiscreteDistribution::new(pts, random_simplex(&mut rng, k))?;
            Ok((p0, p1))
        },
        |(p0, p1)| {
            let res = if p0.len() == 2 { 100 } else { 20 };
            Ok(verify_forced_same_dist_bound(p0, p1, res)?.holds)
        },
    )?;
    let two_term = run_harness("two-term-budget", seed::derive(base, &[4]), instances, random_two_term_instance, |i| {
        Ok(verify_two_term_budget(i)?.holds)
    })?;
    let pinsker = run_harness(
        "pinsker",
        seed::derive(base, &[5]),
        instances,
        |s| {
            let mut rng = seed::rng(s);
            let k = rng.random_range(2..=6);
            Ok((random_simplex(&mut rng, k), random_simplex(&mut rng, k)))
        },
        |(r, s)| Ok(verify_pinsker(r, s)?.holds),
    )?;
    Ok(vec![post_int, jensen, forced, two_term, pinsker])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub truth: f64,
    pub plug_in: f64,
    pub integrated: f64,
    pub plug_in_bias: f64,
    pub integrated_bias: f64,
    pub samples: usize,
    /// `plug_in_bias / integrated_bias`.
    pub ratio: f64,
}

/// Convex-target instance: one feature on levels {−1, 0, 1} with posterior
/// (0.4, 0.2, 0.4) when missing, and `P(y=1 | v) = 0.1 + 0.8·v²`. Compares
/// the prediction at the posterior-mean fill with the average prediction
/// over `samples` draws from the exact missing-value posterior.
pub fn bias_demo(seed: u64, samples: usize) -> Result<BiasReport> {
    let values = [-1.0, 0.0, 1.0];
    let marginal = [0.4, 0.2, 0.4];
    let task = super::prior::TaskTable::from_fn(vec![3], 2, |x, y, _m| {
        let v: f64 = values[x[0]];
        let p1 = 0.1 + 0.8 * v * v;
        // Missingness independent of everything keeps the posterior equal
        // to the marginal.
        marginal[x[0]] * if y == 1 { p1 } else { 1.0 - p1 } * 0.5
    })?;
    let prior = DiscretePrior::uniform(vec![task])?;
    let query = ObsRow::new(vec![None], None);
    let truth = prior.ppd(&[], &query)?[1];
    let posterior = prior.missing_posterior(&[], &query)?;
    let mean: f64 = posterior.iter().zip(values).map(|(p, v)| p * v).sum();
    let nearest = (0..values.len())
        .min_by(|&a, &b| (values[a] - mean).abs().total_cmp(&(values[b] - mean).abs()))
        .expect("non-empty levels");
    let plug_in = prior.conditional_predictive(&[], &query, &[nearest])?[1];
    let cond: Vec<f64> = (0..values.len())
        .map(|l| prior.conditional_predictive(&[], &query, &[l]).map(|p| p[1]))
        .collect::<Result<_>>()?;
    let mut rng = seed::rng(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = values.len() - 1;
        for (l, p) in posterior.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = l;
                break;
            }
        }
        total += cond[pick];
    }
    let integrated = total / samples.max(1) as f64;
    let plug_in_bias = (plug_in - truth).abs();
    let integrated_bias = (integrated - truth).abs();
    Ok(BiasReport {
        truth,
        plug_in,
        integrated,
        plug_in_bias,
        integrated_bias,
        samples,
        ratio: plug_in_bias / integrated_bias,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub statement: String,
    pub instances: usize,
    pub violations: usize,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySuite {
    pub seed: u64,
    pub entries: Vec<SuiteEntry>,
    pub failures: Vec<HarnessFailure>,
}

impl TheorySuite {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.violations == 0)
    }

    pub fn render_text(&self) -> String {
        let w = self.entries.iter().map(|e| e.statement.len()).max().unwrap_or(9).max(9);
        let mut out = format!("{:<w$}  instances  violations  result\n", "statement");
        for e in &self.entries {
            out.push_str(&format!(
                "{:<w$}  {:>9}  {:>10}  {}\n",
                e.statement,
                e.instances,
                e.violations,
                if e.violations == 0 { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

fn entry<S: Serialize>(statement: &str, ok: bool, detail: &S) -> SuiteEntry {
    SuiteEntry {
        statement: statement.into(),
        instances: 1,
        violations: usize::from(!ok),
        detail: serde_json::to_value(detail).unwrap_or(serde_json::Value::Null),
    }
}

/// Every check in one run: the enumerated risk decomposition, the
/// constructed instances and the randomized harness.
pub fn run_theory_suite(seed: u64, instances: usize) -> Result<TheorySuite> {
    let mut entries = Vec::new();
    let prior = DiscretePrior::benchmark(seed)?;
    for (name, pred) in [
        ("risk-decomposition/exact", &ExactPredictor(&prior) as &dyn Predictor),
        ("risk-decomposition/uniform", &UniformPredictor(prior.n_classes())),
    ] {
        let r = verify_pfn_risk_decomposition(&prior, pred, 2)?;
        entries.push(entry(name, r.holds, &r));
    }
    let mu = DiscreteDistribution::scalar(&[-1.0, 1.0], &[0.5, 0.5])?;
    let jensen = verify_posterior_integration_bound(&PostIntInstance {
        nu: mu.clone(),
        mu,
        target: TargetFn::Quadratic { a: vec![1.0], b: 0.0 },
        lipschitz: 2.0,
        predictor: vec![1.0, 1.0],
    })?;
    let gap_one = jensen.jensen.as_ref().is_some_and(|j| j.gap == 1.0);
    entries.push(entry("jensen-gap/constructed", jensen.holds && gap_one, &jensen));
    let forced = verify_forced_same_dist_bound(
        &DiscreteDistribution::point_mass(vec![0.0]),
        &DiscreteDistribution::point_mass(vec![1.0]),
        100,
    )?;
    entries.push(entry("forced-same-distribution/point-masses", forced.holds && forced.best_max_tv >= 0.5, &forced));
    let h = |x: f64| vec![0.8 - x, 0.2 + x];
    let two = verify_two_term_budget(&TwoTermInstance {
        points: vec![vec![0.0], vec![0.1], vec![0.5], vec![0.6]],
        p_star: vec![0.5, 0.0, 0.5, 0.0],
        g: vec![0.0, 0.5, 0.0, 0.5],
        cond_star: vec![h(0.0), h(0.1), h(0.5), h(0.6)],
        cond_h: vec![h(0.0), h(0.1), h(0.5), h(0.6)],
        lipschitz: 2.0,
    })?;
    entries.push(entry("two-term-budget/shifted", two.holds && two.max_error <= 0.2 + BOUND_SLACK, &two));
    let bias = bias_demo(seed, 4000)?;
    entries.push(entry("plug-in-bias", bias.ratio >= 5.0, &bias));
    let mut failures = Vec::new();
    for h in theorem_harness(seed, instances)? {
        entries.push(SuiteEntry {
            statement: format!("randomized/{}", h.statement),
            instances: h.instances,
            violations: h.violations,
            detail: serde_json::Value::Null,
        });
        failures.extend(h.failures);
    }
    Ok(TheorySuite { seed, entries, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::prior::{DiscretePrior, TaskTable};

    fn small_prior() -> DiscretePrior {
        let mk = |a: f64, b: f64| {
            TaskTable::from_fn(vec![2, 2], 2, |x, y, m| {
                let p1 = if x[0] == 1 { a } else { b };
                let py = if y == 1 { p1 } else { 1.0 - p1 };
                let pm = if m & 1 == 1 { 0.2 + 0.5 * x[0] as f64 } else { 0.8 - 0.5 * x[0] as f64 };
                let pm2 = if m & 2 == 2 { 0.3 } else { 0.7 };
                0.25 * py * pm * pm2 * if x[1] == x[0] { 1.5 } else { 0.5 }
            })
            .unwrap()
        };
        DiscretePrior::uniform(vec![mk(0.9, 0.2), mk(0.3, 0.6), mk(0.5, 0.5)]).unwrap()
    }

    #[test]
    fn exact_predictor_has_zero_kl() {
        let p = small_prior();
        let r = verify_pfn_risk_decomposition(&p, &ExactPredictor(&p), 2).unwrap();
        assert!(r.holds, "{r:?}");
        assert!(r.expected_kl.abs() < 1e-12);
        assert!((r.cross_entropy - r.bayes_entropy).abs() < 1e-9);
    }

    #[test]
    fn uniform_predictor_has_risk_ln_c() {
        let p = small_prior();
        let r = verify_pfn_risk_decomposition(&p, &UniformPredictor(2), 1).unwrap();
        assert!(r.holds);
        assert!((r.cross_entropy - 2f64.ln()).abs() < 1e-12, "{}", r.cross_entropy);
        assert!(r.expected_kl > 0.0);
    }

    #[test]
    fn jensen_instance_has_unit_gap() {
        let mu = DiscreteDistribution::scalar(&[-1.0, 1.0], &[0.5, 0.5]).unwrap();
        let inst = PostIntInstance {
            nu: mu.clone(),
            mu,
            target: TargetFn::Quadratic { a: vec![1.0], b: 0.0 },
            lipschitz: 2.0,
            predictor: vec![1.0, 1.0],
        };
        let r = verify_posterior_integration_bound(&inst).unwrap();
        let j = r.jensen.unwrap();
        assert_eq!((j.mean_of_target, j.target_of_mean, j.gap), (1.0, 0.0, 1.0));
        assert_eq!((r.error, r.bound), (0.0, 0.0));
    }

    #[test]
    fn non_lipschitz_target_is_rejected() {
        let mu = DiscreteDistribution::scalar(&[0.0, 2.0], &[0.5, 0.5]).unwrap();
        let inst = PostIntInstance {
            nu: mu.clone(),
            mu,
            target: TargetFn::Quadratic { a: vec![1.0], b: 0.0 },
            lipschitz: 1.0,
            predictor: vec![0.0, 4.0],
        };
        assert!(matches!(verify_posterior_integration_bound(&inst), Err(Error::Contract(_))));
    }

    #[test]
    fn point_masses_force_half_tv() {
        let p0 = DiscreteDistribution::point_mass(vec![0.0]);
        let p1 = DiscreteDistribution::point_mass(vec![1.0]);
        let r = verify_forced_same_dist_bound(&p0, &p1, 100).unwrap();
        assert_eq!(r.candidates, 102);
        assert_eq!(r.tv_p0_p1, 1.0);
        assert!(r.holds);
        assert!((r.best_max_tv - 0.5).abs() < 1e-15);
        assert_eq!(r.midpoint_max_tv, 0.5);
    }

    #[test]
    fn equal_distributions_have_trivial_bound() {
        let p = DiscreteDistribution::scalar(&[0.0, 1.0], &[0.3, 0.7]).unwrap();
        let r = verify_forced_same_dist_bound(&p, &p, 100).unwrap();
        assert_eq!(r.lower_bound, 0.0);
        assert!(r.holds);
        assert!(r.best_max_tv < 1e-15);
    }

    #[test]
    fn shifted_posterior_meets_budget() {
        let h = |x: f64| vec![0.8 - x, 0.2 + x];
        let inst = TwoTermInstance {
            points: vec![vec![0.0], vec![0.1], vec![0.5], vec![0.6]],
            p_star: vec![0.5, 0.0, 0.5, 0.0],
            g: vec![0.0, 0.5, 0.0, 0.5],
            cond_star: vec![h(0.0), h(0.1), h(0.5), h(0.6)],
            cond_h: vec![h(0.0), h(0.1), h(0.5), h(0.6)],
            lipschitz: 2.0,
        };
        let r = verify_two_term_budget(&inst).unwrap();
        assert!((r.w1 - 0.1).abs() < 1e-12);
        assert!(r.max_error <= 0.2 + 1e-12 && r.max_error > 0.2 - 1e-12);
        assert!(r.holds);
    }

    #[test]
    fn exact_components_give_zero_error() {
        let inst = random_two_term_instance(3).unwrap();
        let exact = TwoTermInstance {
            g: inst.p_star.clone(),
            cond_h: inst.cond_star.clone(),
            lipschitz: 1e6,
            ..inst
        };
        let r = verify_two_term_budget(&exact).unwrap();
        assert!(r.max_error < 1e-15 && r.holds);
    }

    #[test]
    fn randomized_instances_are_valid() {
        for s in 0..20 {
            let i = random_two_term_instance(s).unwrap();
            assert!(i.cond_h.iter().all(|r| r.iter().all(|&v| (0.0..=1.0).contains(&v))));
            verify_two_term_budget(&i).unwrap();
            verify_posterior_integration_bound(&random_post_int_instance(s).unwrap()).unwrap();
        }
    }

    #[test]
    fn harness_reports_no_violations() {
        for s in theorem_harness(0, 100).unwrap() {
            assert!(s.passed(), "{}: {:?}", s.statement, s.failures.first());
            assert_eq!(s.instances, 100);
        }
    }

    #[test]
    fn bias_demo_matches_closed_form() {
        let r = bias_demo(0, 4000).unwrap();
        assert!((r.truth - 0.74).abs() < 1e-12);
        assert!((r.plug_in - 0.1).abs() < 1e-12);
        assert!(r.ratio >= 5.0, "{r:?}");
    }

    #[test]
    fn suite_passes() {
        let s = run_theory_suite(1, 20).unwrap();
        assert!(s.passed(), "{}", s.render_text());
        assert!(s.failures.is_empty());
    }

    #[test]
    fn pinsker_on_fixed_pair() {
        let r = verify_pinsker(&[0.2, 0.8], &[0.5, 0.5]).unwrap();
        assert!((r.sign_sup - 0.6).abs() < 1e-15 && (r.twice_tv - 0.6).abs() < 1e-15);
        assert!(r.holds);
    }
}
