//! The Monte Carlo approximation of the complete-data negative log
//! likelihood `Q1`, its gradient, and the per-subject caches that make
//! repeated evaluation cheap.
//!
//! For subject `i` in group `k` the long-form rows share `η_i = xᵀβ` and
//! `u_i = zᵀB`, so summing over rows and draws collapses to
//!
//! ```text
//! Q1 = −C − Σ_j D_j ψ_j − Σ_i δ_i (η_i + u_i·ᾱ_k) + Σ_i e^{η_i} H_i E_i
//! ```
//!
//! with `H_i = Σ_j t*_ij e^{ψ_j}`, `E_i = M⁻¹ Σ_m exp(u_i·α_km)`, `D_j` the
//! events in interval `j` and `C = Σ d log t*`.

use crate::data::LongFormDataset;
use crate::error::{Error, Result};
use crate::math;
use crate::params::ModelParams;
use crate::sampler::PosteriorSamples;

/// Subject-level view of a long-form dataset for one random-effect design.
#[derive(Debug, Clone)]
pub struct SubjectTable {
    pub(crate) n: usize,
    pub(crate) p: usize,
    pub(crate) q: usize,
    pub(crate) n_intervals: usize,
    pub(crate) n_groups: usize,
    pub(crate) group: Vec<usize>,
    pub(crate) delta: Vec<f64>,
    /// Dense `N × J` exposure matrix.
    pub(crate) exposure: Vec<f64>,
    /// `N × p`, row-major.
    pub(crate) x: Vec<f64>,
    /// `N × q`, row-major, first column all ones.
    pub(crate) z: Vec<f64>,
    pub(crate) events: Vec<f64>,
    pub(crate) event_log_exposure: f64,
    pub(crate) members: Vec<Vec<usize>>,
}

impl SubjectTable {
    pub fn new(data: &LongFormDataset, ranef_columns: &[usize]) -> Result<Self> {
        let n = data.n_subjects();
        let p = data.n_covariates();
        let j_count = data.n_intervals();
        if let Some(&bad) = ranef_columns.iter().find(|&&c| c >= p) {
            return Err(Error::DimensionMismatch(format!("random-effect column {bad} >= p = {p}")));
        }
        let q = ranef_columns.len() + 1;
        let mut exposure = vec![0.0; n * j_count];
        let mut delta = vec![0.0; n];
        let mut events = vec![0.0; j_count];
        let mut event_log_exposure = 0.0;
        for row in data.rows() {
            exposure[row.subject * j_count + row.interval] += row.exposure;
            if row.death {
                delta[row.subject] = 1.0;
                events[row.interval] += 1.0;
                event_log_exposure += row.exposure.ln();
            }
        }
        let xs = data.covariates();
        let x: Vec<f64> = xs.iter().copied().collect();
        let mut z = Vec::with_capacity(n * q);
        for i in 0..n {
            z.push(1.0);
            z.extend(ranef_columns.iter().map(|&c| xs[[i, c]]));
        }
        let mut members = vec![Vec::new(); data.n_groups()];
        for (i, &g) in data.subject_groups().iter().enumerate() {
            members[g].push(i);
        }
        Ok(Self {
            n,
            p,
            q,
            n_intervals: j_count,
            n_groups: data.n_groups(),
            group: data.subject_groups().to_vec(),
            delta,
            exposure,
            x,
            z,
            events,
            event_log_exposure,
            members,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    #[inline]
    pub(crate) fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub(crate) fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.q..(i + 1) * self.q]
    }

    #[inline]
    pub(crate) fn exposure_row(&self, i: usize) -> &[f64] {
        &self.exposure[i * self.n_intervals..(i + 1) * self.n_intervals]
    }

    pub(crate) fn check(&self, params: &ModelParams) -> Result<()> {
        params.check_dims(self.n_intervals, self.p)?;
        if params.q() != self.q {
            return Err(Error::DimensionMismatch(format!(
                "params have q={}, design has q={}",
                params.q(),
                self.q
            )));
        }
        Ok(())
    }
}

/// `(E, F, S)` = Monte Carlo means of `w`, `w·α` and `w·‖α‖²` with
/// `w = exp(u·α)`, over the draws of one group stored coordinate-major.
#[inline]
pub(crate) fn exp_moments(u: &[f64], columns: &[f64], sq_norms: &[f64], f: &mut [f64]) -> (f64, f64) {
    match u.len() {
        1 => moments_fixed::<1>(u, columns, sq_norms, f),
        2 => moments_fixed::<2>(u, columns, sq_norms, f),
        3 => moments_fixed::<3>(u, columns, sq_norms, f),
        4 => moments_fixed::<4>(u, columns, sq_norms, f),
        _ => moments_any(u, columns, sq_norms, f),
    }
}

const LANES: usize = 16;

fn moments_fixed<const R: usize>(u: &[f64], columns: &[f64], sq_norms: &[f64], f: &mut [f64]) -> (f64, f64) {
    let m = sq_norms.len();
    let cols: [&[f64]; R] = std::array::from_fn(|d| &columns[d * m..(d + 1) * m]);
    let u: [f64; R] = std::array::from_fn(|d| u[d]);
    let mut e = [0.0; LANES];
    let mut s = [0.0; LANES];
    let mut fa = [[0.0; LANES]; R];
    let full = m - m % LANES;
    for base in (0..full).step_by(LANES) {
        let mut w = [0.0; LANES];
        for d in 0..R {
            let col = &cols[d][base..base + LANES];
            for l in 0..LANES {
                w[l] += u[d] * col[l];
            }
        }
        math::exp_block(&mut w);
        let sq = &sq_norms[base..base + LANES];
        for l in 0..LANES {
            e[l] += w[l];
            s[l] += w[l] * sq[l];
        }
        for d in 0..R {
            let col = &cols[d][base..base + LANES];
            for l in 0..LANES {
                fa[d][l] += w[l] * col[l];
            }
        }
    }
    let mut e_tail = 0.0;
    let mut s_tail = 0.0;
    let mut f_tail = [0.0; R];
    for j in full..m {
        let mut t = 0.0;
        for d in 0..R {
            t += u[d] * cols[d][j];
        }
        let w = math::exp(t);
        e_tail += w;
        s_tail += w * sq_norms[j];
        for d in 0..R {
            f_tail[d] += w * cols[d][j];
        }
    }
    let inv = 1.0 / m as f64;
    for d in 0..R {
        f[d] = (fa[d].iter().sum::<f64>() + f_tail[d]) * inv;
    }
    ((e.iter().sum::<f64>() + e_tail) * inv, (s.iter().sum::<f64>() + s_tail) * inv)
}

fn moments_any(u: &[f64], columns: &[f64], sq_norms: &[f64], f: &mut [f64]) -> (f64, f64) {
    let m = sq_norms.len();
    f.iter_mut().for_each(|v| *v = 0.0);
    let mut e = 0.0;
    let mut s = 0.0;
    for j in 0..m {
        let t: f64 = u.iter().enumerate().map(|(d, ud)| ud * columns[d * m + j]).sum();
        let w = math::exp(t);
        e += w;
        s += w * sq_norms[j];
        for (d, fd) in f.iter_mut().enumerate() {
            *fd += w * columns[d * m + j];
        }
    }
    let inv = 1.0 / m as f64;
    f.iter_mut().for_each(|v| *v *= inv);
    (e * inv, s * inv)
}

/// Cached per-subject quantities for evaluating `Q1` and its gradient at a
/// parameter value under a fixed set of posterior draws.
#[derive(Debug, Clone)]
pub struct Q1State<'a> {
    pub(crate) table: &'a SubjectTable,
    pub(crate) samples: &'a PosteriorSamples,
    pub(crate) r: usize,
    /// Natural log baseline hazards ψ_j.
    pub(crate) psi: Vec<f64>,
    pub(crate) eta: Vec<f64>,
    /// `N × r`: `u_i = z_iᵀ B`.
    pub(crate) u: Vec<f64>,
    pub(crate) cum_hazard: Vec<f64>,
    pub(crate) e: Vec<f64>,
    pub(crate) f: Vec<f64>,
    pub(crate) s: Vec<f64>,
    /// `K × r` posterior means of α.
    pub(crate) alpha_bar: Vec<f64>,
}

impl<'a> Q1State<'a> {
    pub fn new(table: &'a SubjectTable, samples: &'a PosteriorSamples, params: &ModelParams) -> Result<Self> {
        table.check(params)?;
        let r = params.r();
        if samples.n_groups() != table.n_groups || samples.r() != r {
            return Err(Error::DimensionMismatch(format!(
                "samples cover {} groups with r={}, model has {} groups with r={}",
                samples.n_groups(),
                samples.r(),
                table.n_groups,
                r
            )));
        }
        let n = table.n;
        let mut state = Self {
            table,
            samples,
            r,
            psi: params.log_baseline().to_vec(),
            eta: vec![0.0; n],
            u: vec![0.0; n * r],
            cum_hazard: vec![0.0; n],
            e: vec![0.0; n],
            f: vec![0.0; n * r],
            s: vec![0.0; n],
            alpha_bar: samples.groups.iter().flat_map(|g| g.mean.iter().copied()).collect(),
        };
        state.set_beta(params.beta.as_slice().expect("contiguous beta"));
        state.set_loadings(params);
        state.refresh_cum_hazard();
        Ok(state)
    }

    pub(crate) fn set_beta(&mut self, beta: &[f64]) {
        for i in 0..self.table.n {
            self.eta[i] = self.table.x_row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
        }
    }

    pub(crate) fn set_loadings(&mut self, params: &ModelParams) {
        let r = self.r;
        let b = &params.loadings;
        for i in 0..self.table.n {
            let z = self.table.z_row(i);
            let ui = &mut self.u[i * r..(i + 1) * r];
            for (d, out) in ui.iter_mut().enumerate() {
                *out = z.iter().enumerate().map(|(t, zt)| zt * b[[t, d]]).sum();
            }
        }
        self.refresh_moments();
    }

    pub(crate) fn refresh_moments(&mut self) {
        let r = self.r;
        for i in 0..self.table.n {
            let g = &self.samples.groups[self.table.group[i]];
            let (e, s) = exp_moments(
                &self.u[i * r..(i + 1) * r],
                g.columns(),
                &g.sq_norms,
                &mut self.f[i * r..(i + 1) * r],
            );
            self.e[i] = e;
            self.s[i] = s;
        }
    }

    pub(crate) fn refresh_cum_hazard(&mut self) {
        let hz: Vec<f64> = self.psi.iter().map(|p| p.exp()).collect();
        for i in 0..self.table.n {
            self.cum_hazard[i] = self.table.exposure_row(i).iter().zip(&hz).map(|(t, h)| t * h).sum();
        }
    }

    pub(crate) fn set_psi_tilde(&mut self, psi_tilde: &[f64]) {
        let base = psi_tilde[0];
        for (j, p) in self.psi.iter_mut().enumerate() {
            *p = if j == 0 { base } else { base + psi_tilde[j] };
        }
        self.refresh_cum_hazard();
    }

    /// Expected count `e^{η_i} H_i E_i` of subject `i`.
    #[inline]
    pub(crate) fn mu(&self, i: usize) -> f64 {
        self.eta[i].exp() * self.cum_hazard[i] * self.e[i]
    }

    #[inline]
    pub(crate) fn u_dot_alpha_bar(&self, i: usize) -> f64 {
        let k = self.table.group[i];
        let r = self.r;
        self.u[i * r..(i + 1) * r]
            .iter()
            .zip(&self.alpha_bar[k * r..(k + 1) * r])
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn value(&self) -> f64 {
        let t = self.table;
        let mut v = -t.event_log_exposure;
        v -= t.events.iter().zip(&self.psi).map(|(d, p)| d * p).sum::<f64>();
        for i in 0..t.n {
            v -= t.delta[i] * (self.eta[i] + self.u_dot_alpha_bar(i));
            v += self.mu(i);
        }
        v
    }

    /// Weighted exposure `W_j = Σ_i e^{η_i} E_i t*_ij`.
    pub(crate) fn weighted_exposure(&self) -> Vec<f64> {
        let t = self.table;
        let mut w = vec![0.0; t.n_intervals];
        for i in 0..t.n {
            let scale = self.eta[i].exp() * self.e[i];
            for (wj, tij) in w.iter_mut().zip(t.exposure_row(i)) {
                *wj += scale * tij;
            }
        }
        w
    }

    /// Gradient of `Q1` in flattened `(ψ̃, β, vec B)` order.
    pub fn gradient(&self) -> Vec<f64> {
        let t = self.table;
        let r = self.r;
        let w = self.weighted_exposure();
        let g_psi: Vec<f64> = (0..t.n_intervals)
            .map(|j| self.psi[j].exp() * w[j] - t.events[j])
            .collect();
        let mut grad = Vec::with_capacity(t.n_intervals + t.p + t.q * r);
        grad.push(g_psi.iter().sum());
        grad.extend_from_slice(&g_psi[1..]);
        let mut g_beta = vec![0.0; t.p];
        let mut g_b = vec![0.0; t.q * r];
        for i in 0..t.n {
            let mu = self.mu(i);
            let resid = mu - t.delta[i];
            for (g, x) in g_beta.iter_mut().zip(t.x_row(i)) {
                *g += x * resid;
            }
            let base = self.eta[i].exp() * self.cum_hazard[i];
            let k = t.group[i];
            for (tt, zt) in t.z_row(i).iter().enumerate() {
                for d in 0..r {
                    g_b[tt * r + d] +=
                        zt * (base * self.f[i * r + d] - t.delta[i] * self.alpha_bar[k * r + d]);
                }
            }
        }
        grad.extend(g_beta);
        grad.extend(g_b);
        grad
    }
}

/// `Q1` evaluated straight from the long-form rows:
/// `−Σ_k M_k⁻¹ Σ_m Σ_rows [d log μ − μ]`.
pub fn q1_value(params: &ModelParams, samples: &PosteriorSamples, data: &LongFormDataset) -> Result<f64> {
    params.check_dims(data.n_intervals(), data.n_covariates())?;
    let r = params.r();
    if samples.n_groups() != data.n_groups() || samples.r() != r {
        return Err(Error::DimensionMismatch("samples do not match the model".into()));
    }
    let psi = params.log_baseline();
    let b = &params.loadings;
    let mut total = 0.0;
    for row in data.rows() {
        let x = data.covariate_row(row.subject);
        let fixed = row.offset() + psi[row.interval] + x.dot(&params.beta);
        let mut z = Vec::with_capacity(params.q());
        z.push(1.0);
        z.extend(params.ranef_columns.iter().map(|&c| x[c]));
        let zb: Vec<f64> = (0..r)
            .map(|d| z.iter().enumerate().map(|(t, zt)| zt * b[[t, d]]).sum())
            .collect();
        let draws = &samples.groups[row.group].draws;
        let mut acc = 0.0;
        for alpha in draws.rows() {
            let log_mu = fixed + zb.iter().zip(alpha.iter()).map(|(a, c)| a * c).sum::<f64>();
            acc += if row.death { log_mu } else { 0.0 } - log_mu.exp();
        }
        total -= acc / draws.nrows() as f64;
    }
    Ok(total)
}

/// Analytic gradient of [`q1_value`] in flattened `(ψ̃, β, vec B)` order.
pub fn q1_gradient(params: &ModelParams, samples: &PosteriorSamples, data: &LongFormDataset) -> Result<Vec<f64>> {
    let table = SubjectTable::new(data, &params.ranef_columns)?;
    let state = Q1State::new(&table, samples, params)?;
    Ok(state.gradient())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{expand_long_form, IntervalGrid, SurvivalDataset};
    use crate::testutil::{random_long, random_params, random_samples};
    use ndarray::array;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_row_value_is_one() {
        // subject 1 is censored at time 0 and contributes no rows
        let data = SurvivalDataset::new(vec![0, 1], vec![1.0, 0.0], vec![true, false], array![[0.3], [-0.7]])
            .unwrap();
        let long = expand_long_form(&data, &IntervalGrid::new(vec![5.0]).unwrap());
        assert_eq!(long.rows().len(), 1);
        let params = ModelParams::zeros(2, 1, 1);
        let samples = PosteriorSamples::at_origin(2, 1);
        assert!((q1_value(&params, &samples, &long).unwrap() - 1.0).abs() < 1e-15);
        let table = SubjectTable::new(&long, &params.ranef_columns).unwrap();
        let st = Q1State::new(&table, &samples, &params).unwrap();
        assert!((st.value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_loadings_ignore_samples() {
        let long = random_long(3, 60, 3, 3, 4);
        let mut params = random_params(4, 4, 3, 2);
        params.loadings.fill(0.0);
        let a = q1_value(&params, &random_samples(1, 3, 7, 2), &long).unwrap();
        let b = q1_value(&params, &random_samples(2, 3, 11, 2), &long).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn cached_value_matches_row_form() {
        for seed in 0..5 {
            let long = random_long(seed, 40, 3, 4, 5);
            let params = random_params(seed, 5, 4, 2);
            let samples = random_samples(seed, 3, 5, 2);
            let row = q1_value(&params, &samples, &long).unwrap();
            let table = SubjectTable::new(&long, &params.ranef_columns).unwrap();
            let fast = Q1State::new(&table, &samples, &params).unwrap().value();
            assert!((row - fast).abs() < 1e-9 * row.abs().max(1.0), "{row} vs {fast}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let long = random_long(9, 40, 3, 4, 5);
        let params = random_params(10, 5, 4, 2);
        let samples = random_samples(11, 3, 5, 2);
        let grad = q1_gradient(&params, &samples, &long).unwrap();
        let flat = params.flatten();
        let h = 1e-5;
        for (idx, g) in grad.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut f = flat.clone();
            f[idx] += h;
            plus.set_from_flat(&f);
            f[idx] -= 2.0 * h;
            minus.set_from_flat(&f);
            let fd = (q1_value(&plus, &samples, &long).unwrap() - q1_value(&minus, &samples, &long).unwrap())
                / (2.0 * h);
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "coord {idx}: {g} vs {fd}");
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let long = random_long(1, 30, 3, 2, 3);
        let params = ModelParams::zeros(3, 2, 2);
        let samples = random_samples(1, 2, 4, 2);
        assert!(matches!(q1_value(&params, &samples, &long), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn moments_match_naive_sums() {
        let mut g = crate::rng::stream(3, &[0x3E]);
        for r in 1..=5 {
            for m in [1, 15, 16, 37] {
                let cols: Vec<f64> = (0..r * m).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
                let sq: Vec<f64> = (0..m).map(|j| (0..r).map(|d| cols[d * m + j].powi(2)).sum()).collect();
                let u: Vec<f64> = (0..r).map(|_| 0.5 * g.sample::<f64, _>(StandardNormal)).collect();
                let mut f = vec![0.0; r];
                let (e, s) = exp_moments(&u, &cols, &sq, &mut f);
                let w: Vec<f64> = (0..m).map(|j| (0..r).map(|d| u[d] * cols[d * m + j]).sum::<f64>().exp()).collect();
                let e0 = w.iter().sum::<f64>() / m as f64;
                let s0 = w.iter().zip(&sq).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                assert_relative_eq!(e, e0, max_relative = 1e-13);
                assert_relative_eq!(s, s0, max_relative = 1e-13);
                for d in 0..r {
                    let f0 = (0..m).map(|j| w[j] * cols[d * m + j]).sum::<f64>() / m as f64;
                    assert!((f[d] - f0).abs() <= 1e-13 * (1.0 + f0.abs()), "r={r} m={m}");
                }
            }
        }
    }
}
