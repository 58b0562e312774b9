//! Exact inference over small discrete priors and numerical checks of the
//! approximation bounds.

pub mod dist;
pub mod prior;
pub mod verify;

pub use dist::{kl, tv, w1, DiscreteDistribution};
pub use prior::{exact_missing_posterior, exact_posterior_predictive, DiscreteEpisodes, DiscretePrior, ObsRow, TaskTable};
pub use verify::{
    bias_demo, run_theory_suite, theorem_harness, verify_forced_same_dist_bound, verify_pfn_risk_decomposition, verify_pinsker,
    verify_posterior_integration_bound, verify_two_term_budget, BiasReport, ExactPredictor, PostIntInstance, Predictor,
    TargetFn, TheorySuite, TwoTermInstance, UniformPredictor,
};
