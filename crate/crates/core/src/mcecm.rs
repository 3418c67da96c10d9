//! Monte Carlo ECM fit for one `(λ0, λ1)` pair.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{expand_long_form, IntervalGrid, LongFormDataset, SurvivalDataset};
use crate::error::{Error, Result};
use crate::mstep::{run_mstep, MStepConfig};
use crate::objective::{Q1State, SubjectTable};
use crate::params::ModelParams;
use crate::penalty::PenaltyConfig;
use crate::rng;
use crate::sampler::{ChainState, GroupPosterior, PosteriorSamples, SamplerConfig};
use crate::selection::Criterion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_intervals: usize,
    pub max_em: usize,
    pub max_mstep: usize,
    pub mstep_tol: f64,
    /// Tolerance on the largest change of a nonzero parameter between EM
    /// iterations.
    pub em_tol: f64,
    pub consecutive_required: usize,
    pub sampler: SamplerConfig,
    pub penalty: PenaltyConfig,
    pub penalize_intercept_row: bool,
    /// Start loading rows of predictors with `β_l = 0` at zero.
    pub screen: bool,
    pub seed: u64,
    /// Criterion of the penalty search.
    #[serde(default)]
    pub criterion: Criterion,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_intervals: 8,
            max_em: 25,
            max_mstep: 50,
            mstep_tol: 1e-4,
            em_tol: 1e-3,
            consecutive_required: 2,
            sampler: SamplerConfig::default(),
            penalty: PenaltyConfig::default(),
            penalize_intercept_row: true,
            screen: true,
            seed: 2024,
            criterion: Criterion::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_intervals,
            self.max_em,
            self.max_mstep,
            self.consecutive_required,
            self.sampler.m_base,
            self.sampler.m_max,
            self.sampler.batch_size,
        ];
        if self.n_intervals < 2 || counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParameter("fit counts must be positive and J >= 2".into()));
        }
        if !(self.em_tol > 0.0) || !(self.mstep_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        self.penalty.validate()
    }

    pub(crate) fn mstep_config(&self) -> MStepConfig {
        MStepConfig {
            max_iter: self.max_mstep,
            tol: self.mstep_tol,
            penalize_intercept_row: self.penalize_intercept_row,
            ..MStepConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub sigma_hat: Array2<f64>,
    pub q1_at_solution: f64,
    #[serde(skip)]
    pub samples_final: Option<PosteriorSamples>,
    pub selected_fixed: Vec<usize>,
    pub selected_random: Vec<usize>,
    pub em_iterations: usize,
    pub converged: bool,
    pub lambda0: f64,
    pub lambda1: f64,
    /// Final M-step step factor.
    pub step_size: f64,
}

/// Standardized data, its long form and the per-subject design.
#[derive(Debug, Clone)]
pub struct Problem {
    pub data: SurvivalDataset,
    pub grid: IntervalGrid,
    pub long: LongFormDataset,
    pub ranef_columns: Vec<usize>,
    pub(crate) table: SubjectTable,
}

impl Problem {
    /// Standardizes `data` (when needed) and expands it on `grid`, with every
    /// covariate a random-effect candidate.
    pub fn new(data: &SurvivalDataset, grid: &IntervalGrid) -> Result<Self> {
        Self::with_ranef(data, grid, (0..data.n_covariates()).collect())
    }

    pub fn with_ranef(data: &SurvivalDataset, grid: &IntervalGrid, ranef_columns: Vec<usize>) -> Result<Self> {
        let data = data.standardized()?;
        let long = expand_long_form(&data, grid);
        let table = SubjectTable::new(&long, &ranef_columns)?;
        Ok(Self { data, grid: grid.clone(), long, ranef_columns, table })
    }

    pub fn table(&self) -> &SubjectTable {
        &self.table
    }

    pub fn n_subjects(&self) -> usize {
        self.table.n
    }

    pub fn q(&self) -> usize {
        self.ranef_columns.len() + 1
    }
}

/// Interval log hazards `log(D_j / T_j)`; empty intervals borrow half an
/// event so the start is finite.
fn crude_psi_tilde(long: &LongFormDataset) -> Vec<f64> {
    let (events, exposure) = long.interval_totals();
    let psi: Vec<f64> = events
        .iter()
        .zip(&exposure)
        .map(|(d, t)| if *t > 0.0 { (d.max(0.5) / t).ln() } else { 0.0 })
        .collect();
    psi.iter().enumerate().map(|(j, p)| if j == 0 { *p } else { p - psi[0] }).collect()
}

/// Penalized fixed-effects-only fit. `psi_init` replaces the crude start;
/// with `fix_increments` only `ψ̃_1` and `β` move.
pub(crate) fn fit_fixed(
    long: &LongFormDataset,
    lambda0: f64,
    penalty: &PenaltyConfig,
    psi_init: Option<&[f64]>,
    fix_increments: bool,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let table = SubjectTable::new(long, &[])?;
    let mut init = ModelParams::zeros_with_ranef(long.n_intervals(), long.n_covariates(), 1, Vec::new());
    let psi = psi_init.map_or_else(|| crude_psi_tilde(long), <[f64]>::to_vec);
    init.psi_tilde = Array1::from(psi);
    let samples = PosteriorSamples::at_origin(long.n_groups(), 1);
    let cfg = MStepConfig {
        max_iter: 5000,
        tol: 1e-9,
        update_loadings: false,
        fix_psi_increments: fix_increments,
        ..MStepConfig::default()
    };
    let out = run_mstep(&table, &samples, &init, lambda0, 0.0, penalty, 1.0, &cfg)?;
    Ok((out.params.psi_tilde, out.params.beta))
}

/// Fixed-effects-only start: `ψ̃` unpenalized, `β` penalized at `lambda0`,
/// loadings held at zero.
pub fn init_fixed_effects(
    data: &LongFormDataset,
    lambda0: f64,
    penalty: &PenaltyConfig,
) -> Result<(Array1<f64>, Array1<f64>)> {
    fit_fixed(data, lambda0, penalty, None, false)
}

/// Starting parameters. Loading rows use `0.1 + 0.05·((t + m) mod 2)`;
/// with `screen`, rows of covariates whose `β` is zero start at zero.
pub fn init_theta(
    psi_tilde: &Array1<f64>,
    beta: &Array1<f64>,
    r: usize,
    ranef_columns: &[usize],
    screen: bool,
) -> Result<ModelParams> {
    if r == 0 {
        return Err(Error::InvalidParameter("r must be at least 1".into()));
    }
    let mut params = ModelParams::zeros_with_ranef(psi_tilde.len(), beta.len(), r, ranef_columns.to_vec());
    params.psi_tilde = psi_tilde.clone();
    params.beta = beta.clone();
    for t in 0..params.q() {
        let keep = t == 0 || !screen || beta[ranef_columns[t - 1]] != 0.0;
        if keep {
            for m in 0..r {
                params.loadings[[t, m]] = 0.1 + 0.05 * ((t + m) % 2) as f64;
            }
        }
    }
    Ok(params)
}

/// Runs every group's chain for `m` retained draws. Each group uses its
/// own stream, so the result does not depend on scheduling.
pub(crate) fn e_step(
    table: &SubjectTable,
    params: &ModelParams,
    chains: &mut [ChainState],
    m: usize,
    sampler: &SamplerConfig,
    seed: u64,
    iteration: u64,
) -> Result<PosteriorSamples> {
    let groups = chains
        .par_iter_mut()
        .enumerate()
        .map(|(k, chain)| {
            let mut g = rng::stream(seed, &[iteration, k as u64]);
            GroupPosterior::new(table, params, k).run_chain(chain, m, sampler, &mut g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSamples::new(groups))
}

/// MCECM fit on standardized data at one penalty pair.
pub fn fit_mcecm(
    data: &SurvivalDataset,
    grid: &IntervalGrid,
    lambda0: f64,
    lambda1: f64,
    r: usize,
    cfg: &FitConfig,
    warm_start: Option<&ModelParams>,
) -> Result<FitResult> {
    let problem = Problem::new(data, grid)?;
    fit_problem(&problem, lambda0, lambda1, r, cfg, warm_start)
}

/// [`fit_mcecm`] on a prepared [`Problem`].
pub fn fit_problem(
    problem: &Problem,
    lambda0: f64,
    lambda1: f64,
    r: usize,
    cfg: &FitConfig,
    warm_start: Option<&ModelParams>,
) -> Result<FitResult> {
    cfg.validate()?;
    if !(lambda0 >= 0.0 && lambda1 >= 0.0) {
        return Err(Error::InvalidParameter(format!("lambdas must be >= 0, got {lambda0}, {lambda1}")));
    }
    let table = &problem.table;
    let mut params = match warm_start {
        Some(w) => {
            table.check(w)?;
            if w.r() != r || w.ranef_columns != problem.ranef_columns {
                return Err(Error::DimensionMismatch("warm start does not match r or random-effect columns".into()));
            }
            w.clone()
        }
        None => {
            let (psi, beta) = init_fixed_effects(&problem.long, lambda0, &cfg.penalty)?;
            init_theta(&psi, &beta, r, &problem.ranef_columns, cfg.screen)?
        }
    };
    let mcfg = cfg.mstep_config();
    let mut chains = vec![ChainState::new(r); table.n_groups];
    let mut c = 1.0;
    let mut stable = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut samples = None;
    for s in 0..cfg.max_em {
        iterations = s + 1;
        let m = cfg.sampler.draws_at(s);
        let draws = e_step(table, &params, &mut chains, m, &cfg.sampler, cfg.seed, s as u64)?;
        let out = run_mstep(table, &draws, &params, lambda0, lambda1, &cfg.penalty, c, &mcfg)?;
        c = out.step_size;
        let change = params.max_change_on_support(&out.params);
        params = out.params;
        samples = Some(draws);
        if change < cfg.em_tol {
            stable += 1;
            if stable >= cfg.consecutive_required {
                converged = true;
                break;
            }
        } else {
            stable = 0;
        }
    }
    let samples = samples.expect("at least one EM iteration");
    let q1 = Q1State::new(table, &samples, &params)?.value();
    Ok(FitResult {
        sigma_hat: params.sigma(),
        q1_at_solution: q1,
        selected_fixed: params.selected_fixed(),
        selected_random: params.selected_random(),
        samples_final: Some(samples),
        params,
        em_iterations: iterations,
        converged,
        lambda0,
        lambda1,
        step_size: c,
    })
}
