//! Penalty grids, BIC-ICQ, the two-stage `(λ0, λ1)` search and the Growth
//! Ratio estimate of the number of latent factors.

use nalgebra::DMatrix;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcecm::{e_step, fit_fixed, fit_problem, init_theta, FitConfig, FitResult, Problem};
use crate::mstep::{run_mstep, MStepConfig};
use crate::objective::{Q1State, SubjectTable};
use crate::penalty::PenaltyConfig;
use crate::params::ModelParams;
use crate::rng;
use crate::sampler::{ChainState, GroupPosterior, PosteriorSamples};

/// Ascending penalty sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(lambda0: Vec<f64>, lambda1: Vec<f64>) -> Result<Self> {
        for seq in [&lambda0, &lambda1] {
            if seq.is_empty()
                || seq.iter().any(|l| !(l.is_finite() && *l >= 0.0))
                || seq.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::InvalidParameter("penalty sequences must be nonempty, finite and increasing".into()));
            }
        }
        Ok(Self { lambda0, lambda1 })
    }
}

/// `n` log-spaced values from `ratio·max` up to `max`.
pub fn log_sequence(max: f64, ratio: f64, n: usize) -> Vec<f64> {
    let lo = (max * ratio).ln();
    let hi = max.ln();
    (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// A penalty large enough to hold every `β` at zero.
const SHRINK_ALL: f64 = 1e10;

/// Fixed-effects gradient `Σ_i x_il(μ_i − δ_i)/N` at the intercept-only fit,
/// with that fit's `ψ̃`.
fn intercept_only_gradient(problem: &Problem, cfg: &FitConfig) -> Result<(Vec<f64>, ndarray::Array1<f64>)> {
    let long = &problem.long;
    let (psi, _) = fit_fixed(long, SHRINK_ALL, &cfg.penalty, None, false)?;
    let table = SubjectTable::new(long, &[])?;
    let mut params = ModelParams::zeros_with_ranef(long.n_intervals(), long.n_covariates(), 1, Vec::new());
    params.psi_tilde = psi.clone();
    let samples = PosteriorSamples::at_origin(long.n_groups(), 1);
    let grad = Q1State::new(&table, &samples, &params)?.gradient();
    let n = table.n as f64;
    let j = long.n_intervals();
    Ok((grad[j..j + long.n_covariates()].iter().map(|g| g / n).collect(), psi))
}

/// Largest `λ0` at which some `β_l` can still leave zero.
pub fn lambda0_max(problem: &Problem, cfg: &FitConfig) -> Result<f64> {
    let (grad, _) = intercept_only_gradient(problem, cfg)?;
    let max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) / cfg.penalty.pi;
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::DegenerateGradient("fixed-effect gradient vanishes at the intercept-only fit".into()));
    }
    Ok(max)
}

/// Largest `λ1` at which a screened-out loading row can leave zero, using
/// posterior draws at the screened intercept-only start.
pub fn lambda1_max(problem: &Problem, r: usize, cfg: &FitConfig) -> Result<f64> {
    let (_, psi) = intercept_only_gradient(problem, cfg)?;
    let beta = ndarray::Array1::zeros(problem.long.n_covariates());
    let params = init_theta(&psi, &beta, r, &problem.ranef_columns, true)?;
    let table = &problem.table;
    let mut chains = vec![ChainState::new(r); table.n_groups];
    let seed = rng::derive_seed(cfg.seed, &[0x6121D]);
    let samples = e_step(table, &params, &mut chains, cfg.sampler.m_base, &cfg.sampler, seed, 0)?;
    let grad = Q1State::new(table, &samples, &params)?.gradient();
    let offset = table.n_intervals + table.p;
    let n = table.n as f64;
    let max = (1..table.q)
        .map(|t| grad[offset + t * r..offset + (t + 1) * r].iter().map(|g| g * g).sum::<f64>().sqrt() / n)
        .fold(0.0f64, f64::max)
        / cfg.penalty.pi;
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::DegenerateGradient("loading gradient vanishes at the screened start".into()));
    }
    Ok(max)
}

/// Both sequences with `λ_min = ratio·λ_max`, `n_lambda` points each.
pub fn lambda_grid(problem: &Problem, r: usize, cfg: &FitConfig, n_lambda: usize, ratio: f64) -> Result<LambdaGrid> {
    if n_lambda < 2 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need n_lambda >= 2 and ratio in (0, 1), got {n_lambda} and {ratio}"
        )));
    }
    let l0 = lambda0_max(problem, cfg)?;
    let l1 = lambda1_max(problem, r, cfg)?;
    LambdaGrid::new(log_sequence(l0, ratio, n_lambda), log_sequence(l1, ratio, n_lambda))
}

/// Number of free parameters: nonzero `β`, nonzero entries of `B`, and `J`.
pub fn model_dimension(params: &ModelParams) -> usize {
    params.beta.iter().filter(|b| **b != 0.0).count()
        + params.loadings.iter().filter(|b| **b != 0.0).count()
        + params.n_intervals()
}

/// `2(Q1 + Q2) + d·log N` under the reference draws, `N` the number of
/// subjects.
pub fn bic_icq(params: &ModelParams, reference: &PosteriorSamples, problem: &Problem) -> Result<f64> {
    let q1 = Q1State::new(&problem.table, reference, params)?.value();
    Ok(bic_value(q1 + reference.neg_log_prior(), model_dimension(params), problem.n_subjects()))
}

/// Importance draws per group for [`log_marginal_likelihood`].
pub const EVIDENCE_DRAWS: usize = 4000;

/// Observed-data log likelihood `Σ_k log ∫ f(d_k | α) φ(α) dα` of the
/// long-form Poisson model, each integral by importance sampling.
pub fn log_marginal_likelihood(problem: &Problem, params: &ModelParams, draws: usize, seed: u64) -> Result<f64> {
    let table = &problem.table;
    table.check(params)?;
    if draws == 0 {
        return Err(Error::InvalidParameter("need at least one importance draw".into()));
    }
    let psi = params.log_baseline();
    let beta = params.beta.as_slice().expect("contiguous beta");
    let mut total = table.event_log_exposure + table.events.iter().zip(psi.iter()).map(|(d, p)| d * p).sum::<f64>();
    for i in 0..table.n {
        if table.delta[i] > 0.0 {
            total += table.x_row(i).iter().zip(beta).map(|(x, b)| x * b).sum::<f64>();
        }
    }
    let prior_norm = 0.5 * params.r() as f64 * (2.0 * std::f64::consts::PI).ln();
    let groups = (0..table.n_groups)
        .into_par_iter()
        .map(|k| {
            let mut g = rng::stream(seed, &[0xE1D, k as u64]);
            Ok(GroupPosterior::new(table, params, k).log_evidence(draws, &mut g)? - prior_norm)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(total + groups.iter().sum::<f64>())
}

/// `−2 log L + d·log N` with the likelihood from [`log_marginal_likelihood`].
pub fn bic_marginal(problem: &Problem, params: &ModelParams, seed: u64) -> Result<f64> {
    let ll = log_marginal_likelihood(problem, params, EVIDENCE_DRAWS, seed)?;
    Ok(bic_value(-ll, model_dimension(params), problem.n_subjects()))
}

fn bic_value(q: f64, d: usize, n: usize) -> f64 {
    2.0 * q + d as f64 * (n as f64).ln()
}

/// `params` with `B` replaced by `BR`, `R` the orthogonal matrix bringing
/// `B` closest to `target` in Frobenius norm. The likelihood does not change,
/// only the representative matched against a fixed set of draws.
pub fn align_loadings(params: &ModelParams, target: &Array2<f64>) -> Result<ModelParams> {
    let b = &params.loadings;
    if b.dim() != target.dim() {
        return Err(Error::DimensionMismatch(format!("loadings {:?} vs target {:?}", b.dim(), target.dim())));
    }
    let r = b.ncols();
    let cross = b.t().dot(target);
    let m = DMatrix::from_fn(r, r, |i, j| cross[[i, j]]);
    let svd = m.svd(true, true);
    let rot = svd.u.expect("u requested") * svd.v_t.expect("v requested");
    let rot = Array2::from_shape_fn((r, r), |(i, j)| rot[(i, j)]);
    let mut aligned = params.clone();
    aligned.loadings = b.dot(&rot);
    Ok(aligned)
}

/// Iteration cap of the refit in [`support_bic_icq`].
const REFIT_MAX_ITER: usize = 500;
const REFIT_TOL: f64 = 1e-6;

/// BIC-ICQ of the support of `params`: `Q1` under the reference draws is
/// minimized over the nonzero coefficients and loading rows of `params`,
/// starting from `params` with loadings aligned to `reference_loadings`.
pub fn support_bic_icq(
    params: &ModelParams,
    reference: &PosteriorSamples,
    reference_loadings: &Array2<f64>,
    problem: &Problem,
) -> Result<f64> {
    let start = align_loadings(params, reference_loadings)?;
    let cfg = MStepConfig { max_iter: REFIT_MAX_ITER, tol: REFIT_TOL, keep_zeros: true, ..MStepConfig::default() };
    let refit = run_mstep(&problem.table, reference, &start, 0.0, 0.0, &PenaltyConfig::default(), 1.0, &cfg)?;
    let q1 = Q1State::new(&problem.table, reference, &refit.params)?.value();
    Ok(bic_value(q1 + reference.neg_log_prior(), model_dimension(params), problem.n_subjects()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub stage: u8,
    pub lambda0: f64,
    pub lambda1: f64,
    pub bic_icq: f64,
    pub bic_marginal: f64,
    pub dimension: usize,
    pub fit: FitResult,
}

impl PathEntry {
    pub fn score(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Marginal => self.bic_marginal,
            Criterion::Icq => self.bic_icq,
        }
    }
}

/// Information criterion that ranks the models of a penalty path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// BIC-ICQ of the support under the reference model's draws.
    #[default]
    Icq,
    /// BIC with the importance-sampled observed-data likelihood.
    Marginal,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "icq" => Ok(Criterion::Icq),
            "marginal" => Ok(Criterion::Marginal),
            other => Err(Error::InvalidParameter(format!("unknown criterion '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPath {
    pub grid: LambdaGrid,
    pub stage1: Vec<PathEntry>,
    pub stage2: Vec<PathEntry>,
    pub lambda1_opt: f64,
    /// Index into `stage2` of the selected model.
    pub best_index: usize,
    #[serde(skip)]
    pub reference_samples: Option<PosteriorSamples>,
}

impl SelectionPath {
    pub fn best(&self) -> &PathEntry {
        &self.stage2[self.best_index]
    }

    pub fn n_fits(&self) -> usize {
        self.stage1.len() + self.stage2.len()
    }
}

/// Retained draws for the BIC-ICQ reference sample.
pub const REFERENCE_DRAWS: usize = 1000;

fn reference_samples(problem: &Problem, fit: &FitResult, cfg: &FitConfig) -> Result<PosteriorSamples> {
    let table = &problem.table;
    let mut chains = vec![ChainState::new(fit.params.r()); table.n_groups];
    let seed = rng::derive_seed(cfg.seed, &[0x12EF]);
    e_step(table, &fit.params, &mut chains, REFERENCE_DRAWS, &cfg.sampler, seed, 0)
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Stage 1 varies `λ1` at `λ0_min`; stage 2 varies `λ0` at the
/// BIC-ICQ-optimal `λ1`. Both stages run from the smallest penalty upward,
/// each fit warm-started from the previous one. Models are scored by
/// [`support_bic_icq`] under draws from the first stage-1 fit, centered
/// across groups.
pub fn two_stage_search(problem: &Problem, r: usize, cfg: &FitConfig, grid: &LambdaGrid) -> Result<SelectionPath> {
    let lambda0_min = grid.lambda0[0];
    // one importance stream for every model keeps their scores comparable
    let evidence_seed = rng::derive_seed(cfg.seed, &[0xB1C]);
    let mut reference: Option<(PosteriorSamples, Array2<f64>)> = None;
    let mut centered: Option<PosteriorSamples> = None;
    let mut warm: Option<ModelParams> = None;
    let mut stage1 = Vec::with_capacity(grid.lambda1.len());
    for (idx, &l1) in grid.lambda1.iter().enumerate() {
        let fit_cfg = FitConfig { seed: rng::derive_seed(cfg.seed, &[1, idx as u64]), ..cfg.clone() };
        let fit = fit_problem(problem, lambda0_min, l1, r, &fit_cfg, warm.as_ref())?;
        if reference.is_none() {
            reference = Some((reference_samples(problem, &fit, cfg)?, fit.params.loadings.clone()));
            centered = Some(reference.as_ref().expect("just set").0.centered());
        }
        let ref_loadings = &reference.as_ref().expect("reference drawn").1;
        let bic = support_bic_icq(&fit.params, centered.as_ref().expect("reference drawn"), ref_loadings, problem)?;
        warm = Some(fit.params.clone());
        let marginal = bic_marginal(problem, &fit.params, evidence_seed)?;
        stage1.push(entry(1, bic, marginal, fit));
    }
    let reference = reference.expect("stage 1 is nonempty");
    let opt1 = argmin(stage1.iter().map(|e| e.score(cfg.criterion)));
    let lambda1_opt = grid.lambda1[opt1];

    let mut warm = Some(stage1[opt1].fit.params.clone());
    let mut stage2 = Vec::with_capacity(grid.lambda0.len());
    for (idx, &l0) in grid.lambda0.iter().enumerate() {
        let fit_cfg = FitConfig { seed: rng::derive_seed(cfg.seed, &[2, idx as u64]), ..cfg.clone() };
        let fit = fit_problem(problem, l0, lambda1_opt, r, &fit_cfg, warm.as_ref())?;
        let bic = support_bic_icq(&fit.params, centered.as_ref().expect("reference drawn"), &reference.1, problem)?;
        warm = Some(fit.params.clone());
        let marginal = bic_marginal(problem, &fit.params, evidence_seed)?;
        stage2.push(entry(2, bic, marginal, fit));
    }
    let best_index = argmin(stage2.iter().map(|e| e.score(cfg.criterion)));
    Ok(SelectionPath {
        grid: grid.clone(),
        stage1,
        stage2,
        lambda1_opt,
        best_index,
        reference_samples: Some(reference.0),
    })
}

fn entry(stage: u8, bic: f64, marginal: f64, mut fit: FitResult) -> PathEntry {
    fit.samples_final = None;
    PathEntry {
        stage,
        lambda0: fit.lambda0,
        lambda1: fit.lambda1,
        bic_icq: bic,
        bic_marginal: marginal,
        dimension: model_dimension(&fit.params),
        fit,
    }
}

/// `q × K` matrix of centered group-specific coefficient estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEffects {
    pub g: Array2<f64>,
    /// Groups whose interval increments were pinned to the pooled fit.
    pub pinned_groups: Vec<usize>,
    pub penalty: f64,
}

/// Fits the fixed-effects-only model to each group alone at
/// `0.01·λ0_max` and centers the coefficient vectors `(ψ̃_1, β)` across
/// groups. Groups with an interval lacking events keep the pooled
/// increments `ψ̃_2..ψ̃_J`.
pub fn pseudo_random_effects(problem: &Problem, cfg: &FitConfig) -> Result<PseudoEffects> {
    let long = &problem.long;
    let lambda = 0.01 * lambda0_max(problem, cfg)?;
    let (pooled_psi, _) = fit_fixed(long, lambda, &cfg.penalty, None, false)?;
    let table = &problem.table;
    let k_count = table.n_groups;
    let fits = (0..k_count)
        .into_par_iter()
        .map(|k| {
            let members = &table.members[k];
            let sub = long.subset_single_group(members);
            let (events, _) = sub.interval_totals();
            if events.iter().sum::<f64>() < 1.0 {
                return Err(Error::GroupTooSmall(k));
            }
            let pin = events.iter().any(|&d| d == 0.0);
            let psi_init = pooled_psi.as_slice().expect("contiguous psi");
            let (psi, beta) = fit_fixed(&sub, lambda, &cfg.penalty, Some(psi_init), pin)?;
            let mut gamma = Vec::with_capacity(problem.q());
            gamma.push(psi[0]);
            gamma.extend(problem.ranef_columns.iter().map(|&c| beta[c]));
            Ok((gamma, pin))
        })
        .collect::<Result<Vec<_>>>()?;
    let q = problem.q();
    let mut g = Array2::from_shape_fn((q, k_count), |(t, k)| fits[k].0[t]);
    for mut row in g.rows_mut() {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|v| v - mean);
    }
    let pinned_groups = fits.iter().enumerate().filter_map(|(k, f)| f.1.then_some(k)).collect();
    Ok(PseudoEffects { g, pinned_groups, penalty: lambda })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRatio {
    /// Eigenvalues of `GGᵀ/(qK)`, descending.
    pub eigenvalues: Vec<f64>,
    /// `GR(1..=U)`; infinite where only zero eigenvalues follow, NaN past the rank.
    pub ratios: Vec<f64>,
    pub u: usize,
    pub r_hat: usize,
}

/// Default search bound `min(q, K) − 2`, at most 10.
pub fn default_u(q: usize, k: usize) -> usize {
    q.min(k).saturating_sub(2).min(10)
}

/// Growth Ratio from descending eigenvalues.
pub fn growth_ratio_from_eigenvalues(eigenvalues: &[f64], u: usize) -> Result<GrowthRatio> {
    if u == 0 || u + 2 > eigenvalues.len() {
        return Err(Error::InvalidParameter(format!(
            "U must lie in 1..={} for {} eigenvalues",
            eigenvalues.len().saturating_sub(2),
            eigenvalues.len()
        )));
    }
    let top = eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(top > 0.0) {
        return Err(Error::RankDeficient(0));
    }
    // eigenvalues at rounding level count as exact zeros
    let clean: Vec<f64> = eigenvalues.iter().map(|&v| if v > RANK_TOL * top { v } else { 0.0 }).collect();
    let star = |j: usize| -> f64 {
        let tail: f64 = clean[j..].iter().sum();
        match (clean[j - 1] > 0.0, tail > 0.0) {
            (_, true) => clean[j - 1] / tail,
            (true, false) => f64::INFINITY,
            (false, false) => 0.0,
        }
    };
    let ratios: Vec<f64> = (1..=u)
        .map(|j| {
            let (num, den) = ((1.0 + star(j)).ln(), (1.0 + star(j + 1)).ln());
            match (num > 0.0, den > 0.0) {
                (_, true) => num / den,
                (true, false) => f64::INFINITY,
                (false, false) => f64::NAN,
            }
        })
        .collect();
    let r_hat = 1 + argmax(&ratios);
    Ok(GrowthRatio { eigenvalues: eigenvalues.to_vec(), ratios, u, r_hat })
}

/// Relative size below which an eigenvalue is treated as zero.
const RANK_TOL: f64 = 1e-10;

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Growth Ratio estimate of `r` from a `q × K` matrix; `u = None` uses
/// [`default_u`].
pub fn growth_ratio_r(g: &Array2<f64>, u: Option<usize>) -> Result<GrowthRatio> {
    let (q, k) = g.dim();
    let m = DMatrix::from_fn(q, k, |i, j| g[[i, j]]);
    let mut eig: Vec<f64> = m
        .singular_values()
        .iter()
        .map(|s| s * s / (q * k) as f64)
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    growth_ratio_from_eigenvalues(&eig, u.unwrap_or_else(|| default_u(q, k)))
}

/// Growth Ratio estimate of `r` for a prepared problem.
pub fn estimate_r(problem: &Problem, cfg: &FitConfig) -> Result<(PseudoEffects, GrowthRatio)> {
    let pseudo = pseudo_random_effects(problem, cfg)?;
    let gr = growth_ratio_r(&pseudo.g, None)?;
    Ok((pseudo, gr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_cutpoints;
    use crate::testutil::random_dataset;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small_problem(seed: u64, n: usize, k: usize, p: usize) -> Problem {
        let data = random_dataset(seed, n, k, p);
        let grid = compute_cutpoints(data.times(), data.status(), 4).unwrap();
        Problem::new(&data, &grid).unwrap()
    }

    fn quick_config() -> FitConfig {
        let mut cfg = FitConfig { max_em: 2, max_mstep: 5, ..FitConfig::default() };
        cfg.sampler.burnin = 20;
        cfg.sampler.m_base = 20;
        cfg.sampler.m_step = 0;
        cfg
    }

    fn low_rank(seed: u64, q: usize, k: usize, rank: usize) -> Array2<f64> {
        let mut g = rng::stream(seed, &[0x6A]);
        let l = Array2::from_shape_fn((q, rank), |_| g.sample::<f64, _>(StandardNormal));
        let f = Array2::from_shape_fn((rank, k), |_| g.sample::<f64, _>(StandardNormal));
        let mut m = l.dot(&f);
        for mut row in m.rows_mut() {
            let mean = row.mean().unwrap();
            row.mapv_inplace(|v| v - mean);
        }
        m
    }

    #[test]
    fn growth_ratio_fixture() {
        let gr = growth_ratio_from_eigenvalues(&[8.0, 4.0, 1.0, 0.5], 2).unwrap();
        assert!((gr.ratios[0] - 0.691).abs() < 1e-3, "{:?}", gr.ratios);
        assert!((gr.ratios[1] - 1.183).abs() < 1e-3, "{:?}", gr.ratios);
        assert_eq!(gr.r_hat, 2);
    }

    #[test]
    fn growth_ratio_rejects_bad_bound() {
        assert!(growth_ratio_from_eigenvalues(&[3.0, 2.0, 1.0], 2).is_err());
        assert!(growth_ratio_from_eigenvalues(&[3.0, 2.0, 1.0], 0).is_err());
        assert!(growth_ratio_from_eigenvalues(&[0.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn recovers_noiseless_rank() {
        for seed in 0..20 {
            for rank in 1..=3 {
                let gr = growth_ratio_r(&low_rank(seed, 20, 10, rank), None).unwrap();
                assert_eq!(gr.u, 8);
                assert_eq!(gr.r_hat, rank, "seed {seed}: {:?}", gr.ratios);
            }
        }
    }

    #[test]
    fn default_bound() {
        assert_eq!(default_u(20, 10), 8);
        assert_eq!(default_u(26, 5), 3);
        assert_eq!(default_u(100, 100), 10);
        assert_eq!(default_u(2, 9), 0);
    }

    proptest! {
        #[test]
        fn growth_ratio_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let g = low_rank(seed, 12, 8, 2) + &low_rank(seed + 1, 12, 8, 6).mapv(|v| 0.05 * v);
            let a = growth_ratio_r(&g, None).unwrap();
            let b = growth_ratio_r(&g.mapv(|v| v * scale), None).unwrap();
            prop_assert_eq!(a.r_hat, b.r_hat);
            for (x, y) in a.ratios.iter().zip(&b.ratios) {
                prop_assert!(x == y || (x - y).abs() < 1e-9 * x.abs().max(1.0), "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn log_sequence_is_increasing_and_anchored() {
        let s = log_sequence(2.0, 0.05, 10);
        assert_eq!(s.len(), 10);
        assert!((s[0] - 0.1).abs() < 1e-12 && (s[9] - 2.0).abs() < 1e-12);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        let ratios: Vec<f64> = s.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-12));
        assert!(LambdaGrid::new(vec![1.0, 0.5], vec![1.0]).is_err());
        assert!(LambdaGrid::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn bic_arithmetic() {
        let problem = small_problem(3, 100, 4, 3);
        let mut params = ModelParams::zeros(4, 3, 1);
        params.psi_tilde = ndarray::Array1::from(vec![-1.0, 0.2, 0.1, 0.3]);
        params.beta[1] = 0.5;
        params.loadings[[0, 0]] = 0.3;
        let reference = PosteriorSamples::from_draws(vec![Array2::from_elem((3, 1), 0.5); 4]);
        let q1 = Q1State::new(&problem.table, &reference, &params).unwrap().value();
        let q2 = reference.neg_log_prior();
        assert_eq!(model_dimension(&params), 1 + 1 + 4);
        let bic = bic_icq(&params, &reference, &problem).unwrap();
        assert!((bic - (2.0 * (q1 + q2) + 6.0 * 100f64.ln())).abs() < 1e-9);
        assert!((25.0 * 2.0 + 3.0 * 100f64.ln() - 63.8155).abs() < 1e-4);
    }

    #[test]
    fn alignment_undoes_rotations() {
        let mut g = rng::stream(4, &[0xA1]);
        let mut params = ModelParams::zeros(3, 4, 2);
        params.loadings = Array2::from_shape_fn((5, 2), |_| g.sample::<f64, _>(StandardNormal));
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        for rot in [ndarray::array![[c, -s], [s, c]], ndarray::array![[c, s], [s, -c]]] {
            let mut turned = params.clone();
            turned.loadings = params.loadings.dot(&rot);
            let back = align_loadings(&turned, &params.loadings).unwrap();
            assert!(back.loadings.iter().zip(&params.loadings).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!((turned.sigma() - params.sigma()).iter().all(|v| v.abs() < 1e-12));
        }
        assert!(align_loadings(&params, &Array2::zeros((5, 3))).is_err());
    }

    #[test]
    fn rotated_fits_score_alike() {
        let problem = small_problem(6, 120, 4, 2);
        let mut g = rng::stream(6, &[0xA2]);
        let mut params = ModelParams::zeros(4, 2, 2);
        params.psi_tilde = ndarray::Array1::from(vec![-1.0, 0.2, 0.1, 0.3]);
        params.loadings = Array2::from_shape_fn((3, 2), |_| 0.4 * g.sample::<f64, _>(StandardNormal));
        let reference = (crate::testutil::random_samples(6, 4, 200, 2), params.loadings.clone());
        let (c, s) = (1.1f64.cos(), 1.1f64.sin());
        let mut turned = params.clone();
        turned.loadings = params.loadings.dot(&ndarray::array![[c, -s], [s, c]]);
        let a = support_bic_icq(&params, &reference.0, &reference.1, &problem).unwrap();
        let b = support_bic_icq(&turned, &reference.0, &reference.1, &problem).unwrap();
        assert!((a - b).abs() < 1e-8 * a.abs());
        let raw = bic_icq(&turned, &reference.0, &problem).unwrap();
        assert!((raw - a).abs() > 1e-6);
    }

    #[test]
    fn lambda0_max_zeroes_all_coefficients() {
        let problem = small_problem(5, 150, 3, 4);
        let cfg = FitConfig::default();
        let max = lambda0_max(&problem, &cfg).unwrap();
        let (_, beta) = fit_fixed(&problem.long, max * 1.0001, &cfg.penalty, None, false).unwrap();
        assert!(beta.iter().all(|b| *b == 0.0), "{beta:?}");
        let (_, beta) = fit_fixed(&problem.long, max * 0.8, &cfg.penalty, None, false).unwrap();
        assert!(beta.iter().any(|b| *b != 0.0));
    }

    #[test]
    fn pseudo_effects_are_centered() {
        let problem = small_problem(7, 240, 4, 3);
        let pseudo = pseudo_random_effects(&problem, &FitConfig::default()).unwrap();
        assert_eq!(pseudo.g.dim(), (4, 4));
        for row in pseudo.g.rows() {
            assert!(row.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn two_groups_give_mirrored_columns() {
        let problem = small_problem(8, 200, 2, 2);
        let pseudo = pseudo_random_effects(&problem, &FitConfig::default()).unwrap();
        for t in 0..3 {
            assert!((pseudo.g[[t, 0]] + pseudo.g[[t, 1]]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_groups_have_no_spread() {
        let base = random_dataset(9, 60, 2, 2);
        let copies = 3;
        let n = base.n_subjects();
        let groups = (0..n * copies).map(|i| i / n).collect();
        let times: Vec<f64> = (0..copies).flat_map(|_| base.times().to_vec()).collect();
        let status: Vec<bool> = (0..copies).flat_map(|_| base.status().to_vec()).collect();
        let x = ndarray::concatenate(ndarray::Axis(0), &vec![base.covariates().view(); copies]).unwrap();
        let data = crate::data::SurvivalDataset::new(groups, times, status, x).unwrap();
        let grid = compute_cutpoints(data.times(), data.status(), 4).unwrap();
        let problem = Problem::new(&data, &grid).unwrap();
        let pseudo = pseudo_random_effects(&problem, &FitConfig::default()).unwrap();
        assert!(pseudo.g.iter().all(|v| v.abs() < 1e-8), "{:?}", pseudo.g);
        assert!(growth_ratio_r(&pseudo.g.mapv(|_| 0.0), None).is_err());
    }

    #[test]
    fn two_stage_order() {
        let problem = small_problem(11, 90, 3, 3);
        let cfg = quick_config();
        let grid = LambdaGrid::new(vec![0.01, 0.02, 0.04], vec![0.05, 0.1]).unwrap();
        let path = two_stage_search(&problem, 1, &cfg, &grid).unwrap();
        assert_eq!(path.n_fits(), 5);
        let s1: Vec<(f64, f64)> = path.stage1.iter().map(|e| (e.lambda0, e.lambda1)).collect();
        assert_eq!(s1, vec![(0.01, 0.05), (0.01, 0.1)]);
        let s2: Vec<f64> = path.stage2.iter().map(|e| e.lambda0).collect();
        assert_eq!(s2, grid.lambda0);
        assert!(path.stage2.iter().all(|e| e.lambda1 == path.lambda1_opt));
        let best1 = path.stage1.iter().map(|e| e.bic_icq).fold(f64::INFINITY, f64::min);
        assert!(path.stage1.iter().any(|e| e.bic_icq == best1 && e.lambda1 == path.lambda1_opt));
        let best = path.best();
        assert!(path.stage2.iter().all(|e| e.bic_icq >= best.bic_icq));
    }

    #[test]
    fn grid_is_ordered() {
        let problem = small_problem(12, 120, 3, 3);
        let cfg = quick_config();
        let grid = lambda_grid(&problem, 1, &cfg, 6, 0.1).unwrap();
        assert_eq!(grid.lambda0.len(), 6);
        assert_eq!(grid.lambda1.len(), 6);
        assert!((grid.lambda0[0] / grid.lambda0[5] - 0.1).abs() < 1e-12);
        assert!(lambda_grid(&problem, 1, &cfg, 1, 0.1).is_err());
        assert!(lambda_grid(&problem, 1, &cfg, 5, 1.5).is_err());
    }
}
