//! The M-step: minimizes `Q1/N + λ0 Σ ρ(|β_l|) + λ1 Σ ρ(‖b_t‖)` for a
//! fixed set of posterior draws.
//!
//! Each inner iteration cycles once through every `ψ̃_j` (unpenalized),
//! every `β_l` (scalar prox) and every loading row `b_t` (group prox). A
//! block step uses `c / h`, where `h` is the block's curvature (the trace of
//! the block Hessian for loading rows), and halves it until the quadratic
//! majorization `Q(new) ≤ Q(old) + gᵀΔ + ‖Δ‖²/(2·step)` holds. When any
//! block needed backtracking during an iteration, `c` shrinks by `0.95`,
//! down to `min_c`.
//! Every accepted step decreases the penalized objective.

use serde::{Deserialize, Serialize};

use crate::data::LongFormDataset;
use crate::error::{Error, Result};
use crate::objective::{exp_moments, Q1State, SubjectTable};
use crate::params::ModelParams;
use crate::penalty::PenaltyConfig;
use crate::sampler::PosteriorSamples;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStepConfig {
    pub max_iter: usize,
    /// Stop once no coordinate moved more than this in an iteration.
    pub tol: f64,
    pub backtrack: f64,
    pub decay: f64,
    /// Lower bound for the carried step factor.
    pub min_c: f64,
    /// Penalize the random-intercept row like the other loading rows.
    pub penalize_intercept_row: bool,
    /// When false the loadings stay at their initial value.
    pub update_loadings: bool,
    /// When true only `ψ̃_1` moves; the increments `ψ̃_2..ψ̃_J` stay fixed.
    pub fix_psi_increments: bool,
    /// Zero coefficients and zero loading rows of the start stay at zero.
    pub keep_zeros: bool,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-4,
            backtrack: 0.5,
            decay: 0.95,
            min_c: 0.1,
            penalize_intercept_row: true,
            update_loadings: true,
            fix_psi_increments: false,
            keep_zeros: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepState {
    pub params: ModelParams,
    pub step_size: f64,
    /// Penalized objective before the first and after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const MIN_STEP: f64 = 1e-10;
const ACCEPT_SLACK: f64 = 1e-12;

/// Penalty part of the M-step objective.
pub fn penalty_total(
    params: &ModelParams,
    lambda0: f64,
    lambda1: f64,
    penalty: &PenaltyConfig,
    penalize_intercept_row: bool,
) -> f64 {
    let fixed: f64 = params.beta.iter().map(|b| penalty.value(b.abs(), lambda0)).sum();
    let random: f64 = params
        .loadings
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(t, _)| *t > 0 || penalize_intercept_row)
        .map(|(_, row)| penalty.value(row.dot(&row).sqrt(), lambda1))
        .sum();
    fixed + random
}

/// `Q1/N` plus penalties, the quantity the M-step decreases.
#[allow(clippy::too_many_arguments)]
pub fn penalized_objective(
    params: &ModelParams,
    samples: &PosteriorSamples,
    data: &LongFormDataset,
    lambda0: f64,
    lambda1: f64,
    penalty: &PenaltyConfig,
    penalize_intercept_row: bool,
) -> Result<f64> {
    let table = SubjectTable::new(data, &params.ranef_columns)?;
    let state = Q1State::new(&table, samples, params)?;
    Ok(state.value() / table.n as f64
        + penalty_total(params, lambda0, lambda1, penalty, penalize_intercept_row))
}

/// Runs one M-step from `init`.
#[allow(clippy::too_many_arguments)]
pub fn mstep(
    init: &ModelParams,
    samples: &PosteriorSamples,
    data: &LongFormDataset,
    lambda0: f64,
    lambda1: f64,
    penalty: &PenaltyConfig,
    c_init: f64,
    cfg: &MStepConfig,
) -> Result<MStepState> {
    let table = SubjectTable::new(data, &init.ranef_columns)?;
    run_mstep(&table, samples, init, lambda0, lambda1, penalty, c_init, cfg)
}

struct Scratch {
    u: Vec<f64>,
    e: Vec<f64>,
    f: Vec<f64>,
    s: Vec<f64>,
}

/// Step-size bookkeeping shared by all blocks of one inner iteration.
struct LineSearch {
    c: f64,
    backtrack: f64,
    n: f64,
    backtracked: bool,
    max_change: f64,
}

impl LineSearch {
    /// Backtracks from `c·base_step` until the majorization holds. `propose`
    /// maps a step length to the new block value and `delta_q` returns the
    /// change of `Q1` for a proposal, or `None` when it is not finite.
    /// Returns `None` when the proposal equals the current value.
    fn run<P, D>(
        &mut self,
        base_step: f64,
        grad: &[f64],
        current: &[f64],
        mut propose: P,
        mut delta_q: D,
    ) -> Result<Option<Vec<f64>>>
    where
        P: FnMut(f64) -> Vec<f64>,
        D: FnMut(&[f64]) -> Option<f64>,
    {
        let mut step = base_step * self.c;
        loop {
            if step < MIN_STEP * base_step {
                return Err(Error::StepSizeUnderflow(step / base_step));
            }
            let new = propose(step);
            let delta: Vec<f64> = new.iter().zip(current).map(|(a, b)| a - b).collect();
            if delta.iter().all(|d| *d == 0.0) {
                return Ok(None);
            }
            let lin: f64 = grad.iter().zip(&delta).map(|(g, d)| g * d).sum::<f64>() / self.n;
            let quad: f64 = delta.iter().map(|d| d * d).sum::<f64>() / (2.0 * step);
            if let Some(dq) = delta_q(&new) {
                if dq / self.n <= lin + quad + ACCEPT_SLACK {
                    let change = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
                    self.max_change = self.max_change.max(change);
                    return Ok(Some(new));
                }
            }
            self.backtracked = true;
            step *= self.backtrack;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_mstep(
    table: &SubjectTable,
    samples: &PosteriorSamples,
    init: &ModelParams,
    lambda0: f64,
    lambda1: f64,
    penalty: &PenaltyConfig,
    c_init: f64,
    cfg: &MStepConfig,
) -> Result<MStepState> {
    if !(c_init > 0.0) || !(lambda0 >= 0.0) || !(lambda1 >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need c > 0 and lambdas >= 0, got c={c_init}, lambda0={lambda0}, lambda1={lambda1}"
        )));
    }
    if !(cfg.backtrack > 0.0 && cfg.backtrack < 1.0) {
        return Err(Error::InvalidParameter(format!("backtracking factor must lie in (0, 1), got {}", cfg.backtrack)));
    }
    penalty.validate()?;
    let mut params = init.clone();
    let mut st = Q1State::new(table, samples, &params)?;
    let n = table.n as f64;
    let pen_total = |p: &ModelParams| penalty_total(p, lambda0, lambda1, penalty, cfg.penalize_intercept_row);
    let first = st.value() / n + pen_total(&params);
    if !first.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut trace = vec![first];
    let r = params.r();
    let q = params.q();
    let mut scratch = Scratch {
        u: vec![0.0; table.n * r],
        e: vec![0.0; table.n],
        f: vec![0.0; table.n * r],
        s: vec![0.0; table.n],
    };
    let frozen_beta: Option<Vec<bool>> = cfg.keep_zeros.then(|| init.beta.iter().map(|b| *b == 0.0).collect());
    let frozen_rows: Option<Vec<bool>> =
        cfg.keep_zeros.then(|| init.loadings.rows().into_iter().map(|row| row.iter().all(|b| *b == 0.0)).collect());
    let mut c = c_init;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        let mut ls = LineSearch { c, backtrack: cfg.backtrack, n, backtracked: false, max_change: 0.0 };

        update_psi(&mut st, &mut ls, &mut params, cfg.fix_psi_increments)?;
        update_beta(&mut st, &mut ls, &mut params, penalty, lambda0, frozen_beta.as_deref())?;
        if cfg.update_loadings {
            for t in 0..q {
                if frozen_rows.as_ref().is_some_and(|f| f[t]) {
                    continue;
                }
                let lam = if t == 0 && !cfg.penalize_intercept_row { None } else { Some(lambda1) };
                update_loading_row(&mut st, &mut ls, &mut params, &mut scratch, penalty, t, lam)?;
            }
        }

        if ls.backtracked {
            c = (c * cfg.decay).max(cfg.min_c.min(c));
        }
        let obj = st.value() / n + pen_total(&params);
        if !obj.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        trace.push(obj);
        if ls.max_change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(MStepState { params, step_size: c, objective_trace: trace, iterations, converged })
}

fn update_psi(st: &mut Q1State, ls: &mut LineSearch, params: &mut ModelParams, fix_increments: bool) -> Result<()> {
    let table = st.table;
    let w = st.weighted_exposure();
    let j_count = table.n_intervals;
    let mut psi = st.psi.clone();
    let coords = if fix_increments { 1 } else { j_count };
    for j in 0..coords {
        // intervals whose log hazard moves with ψ̃_j
        let affected: Vec<usize> = if j == 0 { (0..j_count).collect() } else { vec![j] };
        let expected: f64 = affected.iter().map(|&l| psi[l].exp() * w[l]).sum();
        let observed: f64 = affected.iter().map(|&l| table.events[l]).sum();
        if !(expected > 0.0) {
            continue;
        }
        let grad = expected - observed;
        let current = params.psi_tilde[j];
        let n = ls.n;
        let accepted = ls.run(
            n / expected,
            &[grad],
            &[current],
            |step| vec![current - step * grad / n],
            |new| {
                let d = new[0] - current;
                let dq = -d * observed + expected * d.exp_m1();
                dq.is_finite().then_some(dq)
            },
        )?;
        if let Some(new) = accepted {
            let d = new[0] - current;
            params.psi_tilde[j] = new[0];
            for &l in &affected {
                psi[l] += d;
            }
        }
    }
    st.set_psi_tilde(params.psi_tilde.as_slice().expect("contiguous psi"));
    Ok(())
}

fn update_beta(
    st: &mut Q1State,
    ls: &mut LineSearch,
    params: &mut ModelParams,
    penalty: &PenaltyConfig,
    lambda0: f64,
    frozen: Option<&[bool]>,
) -> Result<()> {
    let table = st.table;
    let nsub = table.n;
    let p = table.p;
    let mut mu: Vec<f64> = (0..nsub).map(|i| st.mu(i)).collect();
    for l in 0..p {
        if frozen.is_some_and(|f| f[l]) {
            continue;
        }
        let mut grad = 0.0;
        let mut curv = 0.0;
        let mut score_events = 0.0;
        for i in 0..nsub {
            let x = table.x[i * p + l];
            grad += x * (mu[i] - table.delta[i]);
            curv += x * x * mu[i];
            score_events += x * table.delta[i];
        }
        if !(curv > 0.0) {
            continue;
        }
        let current = params.beta[l];
        let n = ls.n;
        let mu_ref = &mu;
        let accepted = ls.run(
            n / curv,
            &[grad],
            &[current],
            |step| vec![penalty.prox_scalar(current - step * grad / n, step, lambda0)],
            |new| {
                let d = new[0] - current;
                let mut dq = -d * score_events;
                for i in 0..nsub {
                    dq += mu_ref[i] * (table.x[i * p + l] * d).exp_m1();
                }
                dq.is_finite().then_some(dq)
            },
        )?;
        if let Some(new) = accepted {
            let d = new[0] - current;
            params.beta[l] = new[0];
            for i in 0..nsub {
                let xd = table.x[i * p + l] * d;
                st.eta[i] += xd;
                mu[i] *= xd.exp();
            }
        }
    }
    Ok(())
}

/// Group update of loading row `t`; `lambda = None` leaves it unpenalized.
fn update_loading_row(
    st: &mut Q1State,
    ls: &mut LineSearch,
    params: &mut ModelParams,
    scratch: &mut Scratch,
    penalty: &PenaltyConfig,
    t: usize,
    lambda: Option<f64>,
) -> Result<()> {
    let table = st.table;
    let samples = st.samples;
    let r = st.r;
    let q = table.q;
    let nsub = table.n;
    let base: Vec<f64> = (0..nsub).map(|i| st.eta[i].exp() * st.cum_hazard[i]).collect();
    let mut grad = vec![0.0; r];
    let mut curv = 0.0;
    for i in 0..nsub {
        let z = table.z[i * q + t];
        if z == 0.0 {
            continue;
        }
        let k = table.group[i];
        for d in 0..r {
            grad[d] += z * (base[i] * st.f[i * r + d] - table.delta[i] * st.alpha_bar[k * r + d]);
        }
        curv += z * z * base[i] * st.s[i];
    }
    if !(curv > 0.0) {
        return Ok(());
    }
    let current: Vec<f64> = params.loadings.row(t).to_vec();
    let n = ls.n;
    let view: &Q1State = st;
    let accepted = ls.run(
        n / curv,
        &grad,
        &current,
        |step| {
            let target: Vec<f64> = current.iter().zip(&grad).map(|(b, g)| b - step * g / n).collect();
            match lambda {
                Some(lam) => penalty.prox_group(&target, step, lam),
                None => target,
            }
        },
        |new| {
            // fills the scratch caches for the proposal as a side effect
            let delta: Vec<f64> = new.iter().zip(&current).map(|(a, b)| a - b).collect();
            let mut dq = 0.0;
            for i in 0..nsub {
                let z = table.z[i * q + t];
                let rows = i * r..(i + 1) * r;
                scratch.u[rows.clone()].copy_from_slice(&view.u[rows.clone()]);
                if z == 0.0 {
                    scratch.e[i] = view.e[i];
                    scratch.s[i] = view.s[i];
                    scratch.f[rows.clone()].copy_from_slice(&view.f[rows]);
                    continue;
                }
                for (u, d) in scratch.u[rows.clone()].iter_mut().zip(&delta) {
                    *u += z * d;
                }
                let k = table.group[i];
                let g = &samples.groups[k];
                let (e, s) = exp_moments(&scratch.u[rows.clone()], g.columns(), &g.sq_norms, &mut scratch.f[rows]);
                scratch.e[i] = e;
                scratch.s[i] = s;
                let shift: f64 = delta.iter().zip(&view.alpha_bar[k * r..(k + 1) * r]).map(|(a, b)| a * b).sum();
                dq += base[i] * (e - view.e[i]) - table.delta[i] * z * shift;
            }
            dq.is_finite().then_some(dq)
        },
    )?;
    if let Some(new) = accepted {
        for (d, v) in new.iter().enumerate() {
            params.loadings[[t, d]] = *v;
        }
        std::mem::swap(&mut st.u, &mut scratch.u);
        std::mem::swap(&mut st.e, &mut scratch.e);
        std::mem::swap(&mut st.f, &mut scratch.f);
        std::mem::swap(&mut st.s, &mut scratch.s);
    }
    Ok(())
}
