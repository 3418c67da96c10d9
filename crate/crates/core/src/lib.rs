//! Penalized piecewise constant hazard mixed-effects survival models.
//!
//! Random effects are decomposed as `γ_k = B α_k` with a `q × r` loading
//! matrix `B` and standard normal latent factors `α_k`. Fixed effects are
//! selected with a folded-concave penalty on each `β_l` and random effects
//! with a group penalty on each row of `B`. Fitting alternates a Monte Carlo
//! E-step (MCMC draws of `α_k`) with a penalized M-step.

pub mod cli;
pub mod data;
pub mod error;
pub mod io;
mod math;
pub mod mcecm;
pub mod mstep;
pub mod objective;
pub mod params;
pub mod penalty;
pub mod rng;
pub mod sampler;
pub mod selection;
pub mod sim;

#[cfg(test)]
pub(crate) mod testutil;

pub use data::{
    compute_cutpoints, expand_long_form, standardize_covariates, tsp_transform, IntervalGrid,
    LongFormDataset, LongFormRow, Standardization, SurvivalDataset,
};
pub use error::{Error, Result};
pub use mcecm::{fit_mcecm, fit_problem, init_fixed_effects, init_theta, FitConfig, FitResult, Problem};
pub use mstep::{mstep, MStepConfig, MStepState};
pub use params::ModelParams;
pub use penalty::{PenaltyConfig, PenaltyKind};
pub use sim::{
    c_index, evaluate_selection, run_replicates, simulate_dataset, BenchConfig, CovariancePreset, SelectionMetrics,
    SimConfig,
};
pub use selection::{
    bic_icq, estimate_r, growth_ratio_r, lambda_grid, pseudo_random_effects, two_stage_search, GrowthRatio,
    LambdaGrid, PseudoEffects, SelectionPath,
};
pub use sampler::{GroupSamples, PosteriorSamples, SamplerConfig};
