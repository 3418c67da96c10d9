//! Posterior of the latent factors `α_k` of one group and an adaptive
//! random-walk Metropolis-within-Gibbs sampler for it.
//!
//! Given the parameters, the log posterior of group `k` is
//!
//! ```text
//! Σ_rows [d log μ − μ] − ‖α‖²/2,   log μ = log t* + vᵀψ̃ + xᵀβ + zᵀBα
//! ```
//!
//! Groups are independent given the parameters, so every group runs its
//! own chain with its own RNG stream.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LongFormDataset;
use crate::error::{Error, Result};
use crate::objective::SubjectTable;
use crate::params::ModelParams;
use crate::rng;

/// Retained draws of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSamples {
    /// `M × r` draws.
    pub draws: Array2<f64>,
    /// Acceptance rate per coordinate over the retained draws.
    pub acceptance: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub(crate) sq_norms: Vec<f64>,
    /// The draws again, coordinate-major (`r × M`).
    pub(crate) columns: Vec<f64>,
}

impl GroupSamples {
    pub fn from_draws(draws: Array2<f64>, acceptance: Vec<f64>) -> Self {
        let m = draws.nrows().max(1) as f64;
        let r = draws.ncols();
        let mut mean = vec![0.0; r];
        for row in draws.rows() {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut variance = vec![0.0; r];
        for row in draws.rows() {
            for ((acc, v), mu) in variance.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        variance.iter_mut().for_each(|v| *v /= m);
        let sq_norms = draws.rows().into_iter().map(|a| a.dot(&a)).collect();
        let draws = draws.as_standard_layout().into_owned();
        let columns = draws.t().iter().copied().collect();
        Self { draws, acceptance, mean, variance, sq_norms, columns }
    }

    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub(crate) fn columns(&self) -> &[f64] {
        &self.columns
    }
}

/// Draws for every group, in group order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub groups: Vec<GroupSamples>,
}

impl PosteriorSamples {
    pub fn new(groups: Vec<GroupSamples>) -> Self {
        Self { groups }
    }

    pub fn from_draws(draws: Vec<Array2<f64>>) -> Self {
        Self::new(
            draws
                .into_iter()
                .map(|d| {
                    let r = d.ncols();
                    GroupSamples::from_draws(d, vec![f64::NAN; r])
                })
                .collect(),
        )
    }

    /// A single draw at the origin for each group; useful when the loadings
    /// are zero and the draws do not matter.
    pub fn at_origin(n_groups: usize, r: usize) -> Self {
        Self::from_draws(vec![Array2::zeros((1, r)); n_groups])
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn r(&self) -> usize {
        self.groups.first().map_or(0, |g| g.draws.ncols())
    }

    /// `Σ_k M_k⁻¹ Σ_m ‖α_km‖²/2 + (r/2) log 2π`, the negative expected
    /// log prior density of the draws.
    pub fn neg_log_prior(&self) -> f64 {
        let r = self.r() as f64;
        self.groups
            .iter()
            .map(|g| {
                let m = g.sq_norms.len() as f64;
                g.sq_norms.iter().sum::<f64>() / (2.0 * m) + 0.5 * r * (2.0 * std::f64::consts::PI).ln()
            })
            .sum()
    }

    /// The draws shifted so that the group means average to zero.
    pub fn centered(&self) -> Self {
        let r = self.r();
        let k = self.n_groups().max(1) as f64;
        let mut grand = vec![0.0; r];
        for g in &self.groups {
            for (acc, v) in grand.iter_mut().zip(&g.mean) {
                *acc += v / k;
            }
        }
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let mut draws = g.draws.clone();
                for (mut col, c) in draws.columns_mut().into_iter().zip(&grand) {
                    col -= *c;
                }
                GroupSamples::from_draws(draws, g.acceptance.clone())
            })
            .collect();
        Self::new(groups)
    }
}

/// Sampler settings. The number of retained draws at EM iteration `s` is
/// `min(m_base + m_step·⌈s/m_every⌉, m_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub burnin: usize,
    pub batch_size: usize,
    pub target_acceptance: f64,
    pub m_base: usize,
    pub m_step: usize,
    pub m_every: usize,
    pub m_max: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            burnin: 250,
            batch_size: 50,
            target_acceptance: 0.44,
            m_base: 250,
            m_step: 250,
            m_every: 5,
            m_max: 2500,
        }
    }
}

impl SamplerConfig {
    /// Retained draws at (one-based) EM iteration `s`.
    pub fn draws_at(&self, s: usize) -> usize {
        let blocks = s.div_ceil(self.m_every.max(1));
        (self.m_base + self.m_step * blocks).min(self.m_max)
    }
}

/// Chain state carried across EM iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub alpha: Vec<f64>,
    /// Log proposal scale per coordinate; `None` until first initialized.
    pub log_scales: Option<Vec<f64>>,
    /// Adaptation batches completed so far.
    pub batches: usize,
}

impl ChainState {
    pub fn new(r: usize) -> Self {
        Self { alpha: vec![0.0; r], log_scales: None, batches: 0 }
    }
}

/// Log posterior of one group's latent factors in the per-subject form.
#[derive(Debug, Clone)]
pub(crate) struct GroupPosterior {
    r: usize,
    /// `e^{η_i} H_i`: expected count with the random part removed.
    base: Vec<f64>,
    delta: Vec<f64>,
    /// `n_k × r`: `w_i = z_iᵀ B`.
    w: Vec<f64>,
    /// `Σ_i δ_i w_i`.
    delta_w: Vec<f64>,
}

impl GroupPosterior {
    pub(crate) fn new(table: &SubjectTable, params: &ModelParams, group: usize) -> Self {
        let r = params.r();
        let psi = params.log_baseline();
        let hz: Vec<f64> = psi.iter().map(|p| p.exp()).collect();
        let beta = params.beta.as_slice().expect("contiguous beta");
        let members = &table.members[group];
        let mut base = Vec::with_capacity(members.len());
        let mut delta = Vec::with_capacity(members.len());
        let mut w = Vec::with_capacity(members.len() * r);
        let mut delta_w = vec![0.0; r];
        for &i in members {
            let eta: f64 = table.x_row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
            let h: f64 = table.exposure_row(i).iter().zip(&hz).map(|(t, h)| t * h).sum();
            base.push(eta.exp() * h);
            delta.push(table.delta[i]);
            let z = table.z_row(i);
            for d in 0..r {
                let wd: f64 = z.iter().enumerate().map(|(t, zt)| zt * params.loadings[[t, d]]).sum();
                w.push(wd);
                delta_w[d] += table.delta[i] * wd;
            }
        }
        Self { r, base, delta, w, delta_w }
    }

    fn linear(&self, alpha: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.r)
            .map(|wi| wi.iter().zip(alpha).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Log posterior up to a constant.
    pub(crate) fn log_density(&self, alpha: &[f64]) -> f64 {
        let lin = self.linear(alpha);
        let data: f64 = lin
            .iter()
            .zip(&self.base)
            .zip(&self.delta)
            .map(|((l, a), d)| d * l - a * l.exp())
            .sum();
        data - 0.5 * alpha.iter().map(|a| a * a).sum::<f64>()
    }

    pub(crate) fn gradient(&self, alpha: &[f64]) -> Vec<f64> {
        let lin = self.linear(alpha);
        let mut g: Vec<f64> = alpha.iter().map(|a| -a).collect();
        for (i, wi) in self.w.chunks_exact(self.r).enumerate() {
            let resid = self.delta[i] - self.base[i] * lin[i].exp();
            for (gd, wd) in g.iter_mut().zip(wi) {
                *gd += resid * wd;
            }
        }
        g
    }

    /// Diagonal of the negative Hessian at `alpha`.
    fn curvature(&self, alpha: &[f64]) -> Vec<f64> {
        let lin = self.linear(alpha);
        let mut c = vec![1.0; self.r];
        for (i, wi) in self.w.chunks_exact(self.r).enumerate() {
            let m = self.base[i] * lin[i].exp();
            for (cd, wd) in c.iter_mut().zip(wi) {
                *cd += m * wd * wd;
            }
        }
        c
    }

    /// Negative Hessian `I + Σ_i e^{lin_i} base_i w_i w_iᵀ` at `alpha`.
    fn precision(&self, alpha: &[f64]) -> DMatrix<f64> {
        let r = self.r;
        let lin = self.linear(alpha);
        let mut h = DMatrix::identity(r, r);
        for (i, wi) in self.w.chunks_exact(r).enumerate() {
            let m = self.base[i] * lin[i].exp();
            for a in 0..r {
                for b in 0..r {
                    h[(a, b)] += m * wi[a] * wi[b];
                }
            }
        }
        h
    }

    /// Posterior mode by damped Newton iterations from the origin.
    fn mode(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let r = self.r;
        let mut alpha = vec![0.0; r];
        let mut value = self.log_density(&alpha);
        for _ in 0..200 {
            let h = self.precision(&alpha);
            let g = DVector::from_vec(self.gradient(&alpha));
            let dir = h.clone().cholesky().ok_or(Error::NonFiniteLogPosterior)?.solve(&g);
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let next: Vec<f64> = alpha.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
                let v = self.log_density(&next);
                if v >= value {
                    alpha = next;
                    value = v;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || t * dir.norm() < 1e-10 {
                break;
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFiniteLogPosterior);
        }
        let h = self.precision(&alpha);
        Ok((alpha, h))
    }

    /// `log ∫ exp(log_density(α)) dα` by importance sampling from a
    /// multivariate t centred at the mode with the inverse Hessian as scale.
    pub(crate) fn log_evidence<R: Rng>(&self, draws: usize, rng: &mut R) -> Result<f64> {
        let r = self.r;
        let (mode, h) = self.mode()?;
        let chol = h.cholesky().ok_or(Error::NonFiniteLogPosterior)?;
        // scale = H⁻¹ = L⁻ᵀL⁻¹, so x = mode + L⁻ᵀ z has covariance H⁻¹
        let l = chol.l();
        let lt = l.transpose();
        let log_det_h: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let nu = EVIDENCE_DOF;
        let rf = r as f64;
        let log_norm = ln_gamma_half(EVIDENCE_DOF as usize + r) - ln_gamma_half(EVIDENCE_DOF as usize)
            - 0.5 * rf * (nu * std::f64::consts::PI).ln()
            + 0.5 * log_det_h;
        let chi = ChiSquared::new(nu).expect("positive degrees of freedom");
        let mut logw = Vec::with_capacity(draws);
        for _ in 0..draws {
            let z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = (nu / chi.sample(rng)).sqrt();
            let y = lt.solve_upper_triangular(&z).expect("nonsingular factor") * s;
            let x: Vec<f64> = mode.iter().zip(y.iter()).map(|(m, v)| m + v).collect();
            let quad = (z.norm_squared()) * s * s;
            let log_g = log_norm - 0.5 * (nu + rf) * (1.0 + quad / nu).ln();
            logw.push(self.log_density(&x) - log_g);
        }
        let top = logw.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        if !top.is_finite() {
            return Err(Error::NonFiniteLogPosterior);
        }
        let mean = logw.iter().map(|v| (v - top).exp()).sum::<f64>() / draws as f64;
        Ok(top + mean.ln())
    }

    /// Runs burn-in then retains `m` draws, updating `chain` in place.
    pub(crate) fn run_chain<R: Rng>(
        &self,
        chain: &mut ChainState,
        m: usize,
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<GroupSamples> {
        let r = self.r;
        if chain.alpha.len() != r {
            *chain = ChainState::new(r);
        }
        let alpha = &mut chain.alpha;
        let log_scales = chain.log_scales.get_or_insert_with(|| {
            self.curvature(alpha).iter().map(|c| (2.4 / c.sqrt()).ln()).collect()
        });
        let n = self.base.len();
        let mut lin = self.linear(alpha);
        let mut exp_lin: Vec<f64> = lin.iter().map(|l| l.exp()).collect();
        let mut proposed = vec![0.0; n];
        if !self.log_density(alpha).is_finite() {
            return Err(Error::NonFiniteLogPosterior);
        }

        let mut draws = Array2::zeros((m, r));
        let mut accepted = vec![0usize; r];
        let mut batch_accepted = vec![0usize; r];
        let mut batch_len = 0usize;
        for it in 0..cfg.burnin + m {
            for d in 0..r {
                let step = log_scales[d].exp() * rng.sample::<f64, _>(StandardNormal);
                let old = alpha[d];
                let new = old + step;
                let mut data_diff = step * self.delta_w[d];
                for i in 0..n {
                    let l = lin[i] + self.w[i * r + d] * step;
                    proposed[i] = l.exp();
                    data_diff -= self.base[i] * (proposed[i] - exp_lin[i]);
                }
                let log_ratio = data_diff - 0.5 * (new * new - old * old);
                if log_ratio.is_nan() {
                    return Err(Error::NonFiniteLogPosterior);
                }
                let accept = log_ratio >= 0.0 || rng.gen::<f64>().ln() < log_ratio;
                if accept {
                    alpha[d] = new;
                    for i in 0..n {
                        lin[i] += self.w[i * r + d] * step;
                    }
                    std::mem::swap(&mut exp_lin, &mut proposed);
                    if it < cfg.burnin {
                        batch_accepted[d] += 1;
                    } else {
                        accepted[d] += 1;
                    }
                }
            }
            if it < cfg.burnin {
                batch_len += 1;
                if batch_len == cfg.batch_size {
                    chain.batches += 1;
                    let rate = (chain.batches as f64).sqrt();
                    for d in 0..r {
                        let acc = batch_accepted[d] as f64 / batch_len as f64;
                        log_scales[d] += (acc - cfg.target_acceptance) / rate;
                        batch_accepted[d] = 0;
                    }
                    batch_len = 0;
                }
            } else {
                draws.row_mut(it - cfg.burnin).assign(&ndarray::ArrayView1::from(&alpha[..]));
            }
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteLogPosterior);
        }
        let acceptance = accepted.iter().map(|&a| a as f64 / m.max(1) as f64).collect();
        Ok(GroupSamples::from_draws(draws, acceptance))
    }
}

/// Degrees of freedom of the importance proposal in [`GroupPosterior::log_evidence`].
const EVIDENCE_DOF: f64 = 5.0;

/// `ln Γ(n/2)`.
fn ln_gamma_half(n: usize) -> f64 {
    let (mut x, mut acc) = if n % 2 == 0 { (1.0, 0.0) } else { (0.5, 0.5 * std::f64::consts::PI.ln()) };
    while 2.0 * x < n as f64 {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

/// Exact log posterior of `α` for group `group`, up to the normalizing
/// constant of the posterior (the data term is complete).
pub fn log_posterior_alpha(
    alpha: &[f64],
    data: &LongFormDataset,
    group: usize,
    params: &ModelParams,
) -> Result<f64> {
    params.check_dims(data.n_intervals(), data.n_covariates())?;
    if alpha.len() != params.r() || group >= data.n_groups() {
        return Err(Error::DimensionMismatch(format!(
            "alpha has length {}, model r = {}",
            alpha.len(),
            params.r()
        )));
    }
    let psi = params.log_baseline();
    let zb = |x: ndarray::ArrayView1<f64>| -> f64 {
        (0..params.r())
            .map(|d| {
                let mut s = params.loadings[[0, d]];
                for (t, &c) in params.ranef_columns.iter().enumerate() {
                    s += x[c] * params.loadings[[t + 1, d]];
                }
                s * alpha[d]
            })
            .sum()
    };
    let mut total = -0.5 * alpha.iter().map(|a| a * a).sum::<f64>();
    for row in data.rows().iter().filter(|r| r.group == group) {
        let x = data.covariate_row(row.subject);
        let log_mu = row.offset() + psi[row.interval] + x.dot(&params.beta) + zb(x);
        total += if row.death { log_mu } else { 0.0 } - log_mu.exp();
    }
    Ok(total)
}

/// Gradient of [`log_posterior_alpha`] with respect to `alpha`.
pub fn log_posterior_alpha_gradient(
    alpha: &[f64],
    data: &LongFormDataset,
    group: usize,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let table = SubjectTable::new(data, &params.ranef_columns)?;
    table.check(params)?;
    if alpha.len() != params.r() || group >= data.n_groups() {
        return Err(Error::DimensionMismatch("alpha does not match the model".into()));
    }
    Ok(GroupPosterior::new(&table, params, group).gradient(alpha))
}

/// Draws `m` posterior samples of one group's latent factors after
/// `burnin` adaptive iterations, starting from the origin.
pub fn sample_posterior(
    data: &LongFormDataset,
    group: usize,
    params: &ModelParams,
    m: usize,
    burnin: usize,
    seed: u64,
) -> Result<GroupSamples> {
    let table = SubjectTable::new(data, &params.ranef_columns)?;
    table.check(params)?;
    if group >= data.n_groups() {
        return Err(Error::DimensionMismatch(format!("group {group} out of range")));
    }
    let cfg = SamplerConfig { burnin, ..SamplerConfig::default() };
    let mut chain = ChainState::new(params.r());
    let mut rng = rng::stream(seed, &[group as u64]);
    GroupPosterior::new(&table, params, group).run_chain(&mut chain, m, &cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{expand_long_form, IntervalGrid, SurvivalDataset};
    use ndarray::array;

    #[test]
    fn centering_zeroes_the_average_group_mean() {
        let samples = PosteriorSamples::from_draws(vec![
            array![[1.0, 0.0], [3.0, 2.0]],
            array![[0.0, -1.0], [0.0, 1.0], [3.0, 3.0]],
        ]);
        let c = samples.centered();
        // group means (2, 1) and (1, 1)
        assert_eq!(c.groups[0].draws, array![[-0.5, -1.0], [1.5, 1.0]]);
        assert_eq!(c.groups[1].mean, vec![-0.5, 0.0]);
        assert_eq!(c.groups[1].sq_norms, vec![6.25, 2.25, 6.25]);
    }

    fn tiny() -> LongFormDataset {
        let data = SurvivalDataset::new(
            vec![0, 0, 1, 1],
            vec![0.4, 1.5, 0.8, 2.2],
            vec![true, false, true, true],
            array![[0.5], [-1.0], [1.2], [0.1]],
        )
        .unwrap();
        expand_long_form(&data, &IntervalGrid::new(vec![1.0]).unwrap())
    }

    #[test]
    fn draw_schedule() {
        let cfg = SamplerConfig::default();
        assert_eq!(cfg.draws_at(1), 500);
        assert_eq!(cfg.draws_at(5), 500);
        assert_eq!(cfg.draws_at(6), 750);
        assert_eq!(cfg.draws_at(25), 1500);
        assert_eq!(cfg.draws_at(200), 2500);
    }

    #[test]
    fn zero_loadings_reduce_to_prior() {
        let data = tiny();
        let mut params = ModelParams::zeros(2, 1, 1);
        params.beta[0] = 0.3;
        let at0 = log_posterior_alpha(&[0.0], &data, 0, &params).unwrap();
        let at = log_posterior_alpha(&[1.7], &data, 0, &params).unwrap();
        assert!((at - at0 + 0.5 * 1.7 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn single_row_closed_form() {
        // one subject with unit exposure and an event; everything else zero
        let data = SurvivalDataset::new(
            vec![0, 1],
            vec![1.0, 0.5],
            vec![true, true],
            array![[0.0], [0.0]],
        )
        .unwrap();
        let lf = expand_long_form(&data, &IntervalGrid::new(vec![5.0]).unwrap());
        let mut params = ModelParams::zeros_with_ranef(2, 1, 1, vec![]);
        params.loadings[[0, 0]] = 1.0;
        let lp0 = log_posterior_alpha(&[0.0], &lf, 0, &params).unwrap();
        for a in [-1.0, 0.3, 2.0] {
            let lp = log_posterior_alpha(&[a], &lf, 0, &params).unwrap();
            let expected = a - a.exp() - a * a / 2.0;
            let expected0 = -1.0;
            assert!(((lp - lp0) - (expected - expected0)).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let data = tiny();
        let mut params = ModelParams::zeros(2, 1, 2);
        params.loadings = array![[0.5, 0.1], [0.2, -0.3]];
        let a = sample_posterior(&data, 1, &params, 200, 100, 11).unwrap();
        let b = sample_posterior(&data, 1, &params, 200, 100, 11).unwrap();
        assert_eq!(a.draws, b.draws);
        let c = sample_posterior(&data, 1, &params, 200, 100, 12).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn fast_density_matches_row_form() {
        let data = tiny();
        let mut params = ModelParams::zeros(2, 1, 2);
        params.psi_tilde = array![-0.2, 0.4];
        params.beta[0] = 0.7;
        params.loadings = array![[0.5, 0.1], [0.2, -0.3]];
        let table = SubjectTable::new(&data, &params.ranef_columns).unwrap();
        let post = GroupPosterior::new(&table, &params, 1);
        let a = [0.3, -0.8];
        let b = [-1.1, 0.4];
        let fast = post.log_density(&a) - post.log_density(&b);
        let slow = log_posterior_alpha(&a, &data, 1, &params).unwrap()
            - log_posterior_alpha(&b, &data, 1, &params).unwrap();
        assert!((fast - slow).abs() < 1e-12);
    }

    #[test]
    fn half_integer_gamma() {
        assert!((ln_gamma_half(1) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-15);
        assert!((ln_gamma_half(5) - 1.329_340_388_179_137f64.ln()).abs() < 1e-14);
        assert!((ln_gamma_half(6) - 2f64.ln()).abs() < 1e-15);
        assert!((ln_gamma_half(12) - 120f64.ln()).abs() < 1e-13);
    }

    fn log_trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / (n - 1) as f64;
        let vals: Vec<f64> = (0..n).map(|i| f(lo + h * i as f64)).collect();
        let top = vals.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum: f64 = vals
            .iter()
            .enumerate()
            .map(|(i, v)| if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * (v - top).exp())
            .sum();
        top + (sum * h).ln()
    }

    #[test]
    fn evidence_matches_quadrature() {
        let data = crate::testutil::random_long(21, 80, 2, 2, 4);
        let mut params = ModelParams::zeros(4, 2, 1);
        params.psi_tilde = array![-0.5, 0.2, 0.1, 0.3];
        params.beta = array![0.3, -0.2];
        params.loadings = array![[0.8], [0.4], [-0.3]];
        let table = SubjectTable::new(&data, &params.ranef_columns).unwrap();
        for k in 0..2 {
            let post = GroupPosterior::new(&table, &params, k);
            let exact = log_trapezoid(|a| post.log_density(&[a]), -12.0, 12.0, 20001);
            let mut g = rng::stream(5, &[k as u64]);
            let est = post.log_evidence(4000, &mut g).unwrap();
            assert!((est - exact).abs() < 1e-2, "group {k}: {est} vs {exact}");
        }
    }

    #[test]
    fn evidence_without_loadings_is_gaussian_mass() {
        let data = tiny();
        let mut params = ModelParams::zeros(2, 1, 2);
        params.beta[0] = 0.4;
        let table = SubjectTable::new(&data, &params.ranef_columns).unwrap();
        let post = GroupPosterior::new(&table, &params, 0);
        let constant = post.log_density(&[0.0, 0.0]);
        let mut g = rng::stream(8, &[]);
        let est = post.log_evidence(4000, &mut g).unwrap();
        let exact = constant + (2.0 * std::f64::consts::PI).ln();
        assert!((est - exact).abs() < 1e-2, "{est} vs {exact}");
    }

    #[test]
    fn zero_loadings_sample_the_prior() {
        let data = crate::testutil::random_long(3, 60, 2, 1, 3);
        let params = ModelParams::zeros(3, 1, 2);
        let s = sample_posterior(&data, 0, &params, 4000, 250, 9).unwrap();
        for d in 0..2 {
            let col = s.draws.column(d);
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 0.15, "mean {mean}");
            assert!((var - 1.0).abs() < 0.15, "var {var}");
            assert!((0.2..=0.6).contains(&s.acceptance[d]), "acceptance {:?}", s.acceptance);
        }
    }
}
