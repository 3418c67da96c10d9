//! Simulation from the piecewise constant hazard mixed model, selection
//! metrics, the concordance index and replicate studies.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compute_cutpoints, standardize_covariates, SurvivalDataset};
use crate::error::{Error, Result};
use crate::mcecm::{FitConfig, Problem};
use crate::params::ModelParams;
use crate::rng;
use crate::selection::{estimate_r, lambda_grid, two_stage_search};

/// Built-in true loading matrices. Each pairs rows (0, 1), (2, 3) and
/// (4, 5) on one factor, giving `Σ` eigenvalues (1.5, 1.5, 1.0) for
/// `Small` and (3.38, 3.38, 2.25) for `Moderate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariancePreset {
    Small,
    Moderate,
}

impl CovariancePreset {
    pub fn eigenvalues(self) -> [f64; 3] {
        match self {
            CovariancePreset::Small => [1.5, 1.5, 1.0],
            CovariancePreset::Moderate => [3.38, 3.38, 2.25],
        }
    }

    /// `q × 3` loadings; requires `q ≥ 6`.
    pub fn loadings(self, q: usize) -> Result<Array2<f64>> {
        if q < 6 {
            return Err(Error::InvalidParameter(format!("presets need q >= 6, got {q}")));
        }
        let mut b = Array2::zeros((q, 3));
        for (m, ev) in self.eigenvalues().iter().enumerate() {
            let v = (ev / 2.0).sqrt();
            b[[2 * m, m]] = v;
            b[[2 * m + 1, m]] = v;
        }
        Ok(b)
    }
}

impl std::str::FromStr for CovariancePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Self::Small),
            "moderate" => Ok(Self::Moderate),
            other => Err(Error::InvalidParameter(format!("unknown covariance preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub beta_true: Vec<f64>,
    /// `(p + 1) × r`; row 0 is the random intercept.
    pub b_true: Array2<f64>,
    pub psi_star: Vec<f64>,
    pub sim_cutpoints: Vec<f64>,
    pub censor_max: f64,
    pub seed: u64,
}

pub const PAPER_PSI_STAR: [f64; 5] = [-1.5, 1.0, 2.7, 3.7, 6.8];
pub const PAPER_CUTPOINTS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

impl SimConfig {
    /// The paper's design: `β* = beta_value` on the first five covariates,
    /// a preset `B*` on the intercept and first five covariates, uniform
    /// censoring on (0, 5).
    pub fn paper(n: usize, k: usize, p: usize, beta_value: f64, preset: CovariancePreset, seed: u64) -> Result<Self> {
        if p < 5 {
            return Err(Error::InvalidParameter(format!("the paper design needs p >= 5, got {p}")));
        }
        let beta_true = (0..p).map(|l| if l < 5 { beta_value } else { 0.0 }).collect();
        let cfg = Self {
            n,
            k,
            p,
            beta_true,
            b_true: preset.loadings(p + 1)?,
            psi_star: PAPER_PSI_STAR.to_vec(),
            sim_cutpoints: PAPER_CUTPOINTS.to_vec(),
            censor_max: 5.0,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.k < 2 || self.k > self.n {
            return Err(Error::InvalidParameter("need N >= K >= 2".into()));
        }
        if self.beta_true.len() != self.p || self.b_true.nrows() != self.p + 1 || self.b_true.ncols() == 0 {
            return Err(Error::DimensionMismatch("beta_true must have p entries and B_true p + 1 rows".into()));
        }
        if self.psi_star.len() != self.sim_cutpoints.len() + 1 {
            return Err(Error::DimensionMismatch("psi_star needs one entry per simulation interval".into()));
        }
        if self.sim_cutpoints.first().is_some_and(|c| *c <= 0.0)
            || self.sim_cutpoints.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidGrid("simulation cut points must be positive and increasing".into()));
        }
        if !(self.censor_max > 0.0) {
            return Err(Error::InvalidParameter("censor_max must be positive".into()));
        }
        Ok(())
    }

    pub fn r(&self) -> usize {
        self.b_true.ncols()
    }

    pub fn sigma_true(&self) -> Array2<f64> {
        self.b_true.dot(&self.b_true.t())
    }

    pub fn true_fixed(&self) -> Vec<usize> {
        (0..self.p).filter(|&l| self.beta_true[l] != 0.0).collect()
    }

    pub fn true_random(&self) -> Vec<usize> {
        (0..=self.p).filter(|&t| self.b_true.row(t).iter().any(|v| *v != 0.0)).collect()
    }
}

/// Event time from hazards `exp(ψ*_j + η)` on the simulation intervals,
/// chaining exponential draws across interval boundaries.
pub fn piecewise_event_time<R: Rng>(eta: f64, psi_star: &[f64], cutpoints: &[f64], rng: &mut R) -> f64 {
    let mut start = 0.0;
    for (j, psi) in psi_star.iter().enumerate() {
        let e = Exp::new((psi + eta).exp()).expect("positive rate").sample(rng);
        match cutpoints.get(j) {
            Some(&end) if start + e >= end => start = end,
            _ => return start + e,
        }
    }
    unreachable!("the last interval is unbounded")
}

/// One dataset. Groups are contiguous blocks of subjects and share one
/// draw of `α_k`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<SurvivalDataset> {
    cfg.validate()?;
    let mut g = rng::stream(cfg.seed, &[0x51]);
    let raw = Array2::from_shape_fn((cfg.n, cfg.p), |_| g.sample::<f64, _>(StandardNormal));
    let (x, _) = standardize_covariates(&raw)?;
    let r = cfg.r();
    let gammas: Vec<Array1<f64>> = (0..cfg.k)
        .map(|_| {
            let alpha = Array1::from_shape_fn(r, |_| g.sample::<f64, _>(StandardNormal));
            cfg.b_true.dot(&alpha)
        })
        .collect();
    let beta = Array1::from(cfg.beta_true.clone());
    let mut groups = Vec::with_capacity(cfg.n);
    let mut times = Vec::with_capacity(cfg.n);
    let mut status = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let k = i * cfg.k / cfg.n;
        let xi = x.row(i);
        let gamma = &gammas[k];
        let random = gamma[0] + xi.dot(&gamma.slice(ndarray::s![1..]));
        let eta = xi.dot(&beta) + random;
        let t = piecewise_event_time(eta, &cfg.psi_star, &cfg.sim_cutpoints, &mut g);
        let c = g.gen_range(0.0..cfg.censor_max);
        groups.push(k);
        times.push(t.min(c));
        status.push(t < c);
    }
    SurvivalDataset::new(groups, times, status, x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub tp_fixed: f64,
    pub fp_fixed: f64,
    pub tp_random: f64,
    pub fp_random: f64,
    pub mean_abs_dev: f64,
    pub frob_std: f64,
    pub censor_rate: f64,
    pub runtime_secs: f64,
}

fn percent(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 { empty } else { 100.0 * num as f64 / den as f64 }
}

/// Compares fitted parameters with the truth. Rates with an empty
/// denominator are reported as 100 (TP) or 0 (FP).
pub fn evaluate_selection(params: &ModelParams, truth: &SimConfig) -> Result<SelectionMetrics> {
    if params.p() != truth.p || params.q() != truth.p + 1 {
        return Err(Error::DimensionMismatch("fit and truth dimensions differ".into()));
    }
    let sel_fixed = params.selected_fixed();
    let true_fixed = truth.true_fixed();
    let tp_f = sel_fixed.iter().filter(|l| true_fixed.contains(l)).count();
    let fp_f = sel_fixed.len() - tp_f;

    let sel_random = params.selected_random();
    let true_random = truth.true_random();
    let tp_r = sel_random.iter().filter(|t| true_random.contains(t)).count();
    let fp_r = sel_random.iter().filter(|t| **t > 0 && !true_random.contains(t)).count();
    let null_rows = (1..=truth.p).filter(|t| !true_random.contains(t)).count();

    let mean_abs_dev = if true_fixed.is_empty() {
        0.0
    } else {
        true_fixed.iter().map(|&l| (params.beta[l] - truth.beta_true[l]).abs()).sum::<f64>() / true_fixed.len() as f64
    };
    let diff = params.sigma() - truth.sigma_true();
    let frob = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(SelectionMetrics {
        tp_fixed: percent(tp_f, true_fixed.len(), 100.0),
        fp_fixed: percent(fp_f, truth.p - true_fixed.len(), 0.0),
        tp_random: percent(tp_r, true_random.len(), 100.0),
        fp_random: percent(fp_r, null_rows, 0.0),
        mean_abs_dev,
        frob_std: frob / sel_random.len().max(1) as f64,
        censor_rate: 0.0,
        runtime_secs: 0.0,
    })
}

/// Harrell's concordance: pairs with `δ_i = 1` and `y_i < y_j`, ties in
/// risk counting one half.
pub fn c_index(risk: &[f64], times: &[f64], status: &[bool]) -> Result<f64> {
    if risk.len() != times.len() || risk.len() != status.len() {
        return Err(Error::DimensionMismatch("risk, times and status lengths differ".into()));
    }
    if risk.len() < 2 {
        return Err(Error::InvalidParameter("need at least two subjects".into()));
    }
    let mut pairs = 0.0;
    let mut score = 0.0;
    for i in 0..risk.len() {
        if !status[i] {
            continue;
        }
        for j in 0..risk.len() {
            if times[i] < times[j] {
                pairs += 1.0;
                if risk[i] > risk[j] {
                    score += 1.0;
                } else if risk[i] == risk[j] {
                    score += 0.5;
                }
            }
        }
    }
    if pairs == 0.0 {
        return Err(Error::NoComparablePairs);
    }
    Ok(score / pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub fit: FitConfig,
    /// `None` estimates `r` by the Growth Ratio.
    pub r: Option<usize>,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { fit: FitConfig::default(), r: None, n_lambda: 10, lambda_ratio: 0.05, threads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub r_used: Option<usize>,
    pub metrics: Option<SelectionMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub replicates: usize,
    pub failed: usize,
    pub tp_fixed: f64,
    pub fp_fixed: f64,
    pub tp_random: f64,
    pub fp_random: f64,
    pub mean_abs_dev: f64,
    pub frob_std: f64,
    pub censor_rate: f64,
    pub median_runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub sim: SimConfig,
    pub bench: BenchConfig,
    pub records: Vec<ReplicateRecord>,
    pub summary: BenchSummary,
}

/// Simulates, selects and scores one replicate.
pub fn run_replicate(sim: &SimConfig, bench: &BenchConfig) -> Result<(usize, SelectionMetrics)> {
    let start = Instant::now();
    let data = simulate_dataset(sim)?;
    let grid = compute_cutpoints(data.times(), data.status(), bench.fit.n_intervals)?;
    let problem = Problem::new(&data, &grid)?;
    let fit_cfg = FitConfig { seed: rng::derive_seed(sim.seed, &[0xF17]), ..bench.fit.clone() };
    let r = match bench.r {
        Some(r) => r,
        None => estimate_r(&problem, &fit_cfg)?.1.r_hat,
    };
    let lambdas = lambda_grid(&problem, r, &fit_cfg, bench.n_lambda, bench.lambda_ratio)?;
    let path = two_stage_search(&problem, r, &fit_cfg, &lambdas)?;
    let mut metrics = evaluate_selection(&path.best().fit.params, sim)?;
    metrics.censor_rate = data.censoring_rate();
    metrics.runtime_secs = start.elapsed().as_secs_f64();
    Ok((r, metrics))
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 { values[m] } else { 0.5 * (values[m - 1] + values[m]) }
}

pub fn summarize(records: &[ReplicateRecord]) -> BenchSummary {
    let ok: Vec<&SelectionMetrics> = records.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let mean = |f: fn(&SelectionMetrics) -> f64| {
        if ok.is_empty() { f64::NAN } else { ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64 }
    };
    let mut runtimes: Vec<f64> = ok.iter().map(|m| m.runtime_secs).collect();
    BenchSummary {
        replicates: records.len(),
        failed: records.len() - ok.len(),
        tp_fixed: mean(|m| m.tp_fixed),
        fp_fixed: mean(|m| m.fp_fixed),
        tp_random: mean(|m| m.tp_random),
        fp_random: mean(|m| m.fp_random),
        mean_abs_dev: mean(|m| m.mean_abs_dev),
        frob_std: mean(|m| m.frob_std),
        censor_rate: mean(|m| m.censor_rate),
        median_runtime_secs: median(&mut runtimes),
    }
}

/// `replicates` independent studies with seeds derived from `sim.seed`.
/// A failing replicate is recorded with its error.
pub fn run_replicates(sim: &SimConfig, bench: &BenchConfig, replicates: usize) -> Result<BenchReport> {
    if replicates == 0 {
        return Err(Error::InvalidParameter("need at least one replicate".into()));
    }
    sim.validate()?;
    let one = |i: usize| {
        let seed = rng::derive_seed(sim.seed, &[i as u64]);
        let cfg = SimConfig { seed, ..sim.clone() };
        match run_replicate(&cfg, bench) {
            Ok((r, m)) => ReplicateRecord { replicate: i, seed, r_used: Some(r), metrics: Some(m), error: None },
            Err(e) => ReplicateRecord { replicate: i, seed, r_used: None, metrics: None, error: Some(e.to_string()) },
        }
    };
    let records: Vec<ReplicateRecord> = if bench.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(bench.threads)
            .build()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        pool.install(|| (0..replicates).into_par_iter().map(one).collect())
    } else {
        (0..replicates).map(one).collect()
    };
    let summary = summarize(&records);
    Ok(BenchReport { sim: sim.clone(), bench: bench.clone(), records, summary })
}

const CSV_HEADER: [&str; 10] = [
    "replicate",
    "tp_fixef",
    "fp_fixef",
    "tp_ranef",
    "fp_ranef",
    "t_med_hours",
    "abs_dev_mean",
    "frob_norm",
    "censor_rate",
    "error",
];

/// One row per replicate plus a `summary` row, Table 1 column names.
pub fn write_report_csv<W: std::io::Write>(report: &BenchReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for rec in &report.records {
        let mut row = vec![rec.replicate.to_string()];
        match &rec.metrics {
            Some(m) => row.extend(
                [m.tp_fixed, m.fp_fixed, m.tp_random, m.fp_random, m.runtime_secs / 3600.0, m.mean_abs_dev, m.frob_std, m.censor_rate]
                    .iter()
                    .map(f64::to_string),
            ),
            None => row.extend(std::iter::repeat(String::new()).take(8)),
        }
        row.push(rec.error.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    let s = &report.summary;
    let mut row = vec!["summary".to_string()];
    row.extend(
        [s.tp_fixed, s.fp_fixed, s.tp_random, s.fp_random, s.median_runtime_secs / 3600.0, s.mean_abs_dev, s.frob_std, s.censor_rate]
            .iter()
            .map(f64::to_string),
    );
    row.push(String::new());
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn presets_have_stated_spectra() {
        for preset in [CovariancePreset::Small, CovariancePreset::Moderate] {
            let b = preset.loadings(11).unwrap();
            let sigma = b.dot(&b.t());
            let m = nalgebra::DMatrix::from_fn(11, 11, |i, j| sigma[[i, j]]);
            let mut eig: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            for (a, b) in eig.iter().zip(preset.eigenvalues()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(eig[3].abs() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = SimConfig::paper(200, 5, 10, 1.0, CovariancePreset::Small, 3).unwrap();
        let a = simulate_dataset(&cfg).unwrap();
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a.times(), b.times());
        assert_eq!(a.status(), b.status());
        for (y, d) in a.times().iter().zip(a.status()) {
            assert!(*y >= 0.0 && (*y < 5.0 || !*d));
        }
    }

    #[test]
    fn metric_examples() {
        let truth = SimConfig::paper(100, 5, 10, 1.0, CovariancePreset::Moderate, 1).unwrap();
        let mut params = ModelParams::zeros(8, 10, 3);
        for l in [0, 1, 2, 5] {
            params.beta[l] = 1.0;
        }
        params.loadings = truth.b_true.clone();
        let m = evaluate_selection(&params, &truth).unwrap();
        assert_eq!(m.tp_fixed, 60.0);
        assert_eq!(m.fp_fixed, 20.0);
        assert_eq!(m.tp_random, 100.0);
        assert_eq!(m.fp_random, 0.0);
        assert_eq!(m.frob_std, 0.0);
        assert!((m.mean_abs_dev - 0.4).abs() < 1e-12);
    }

    #[test]
    fn frobenius_is_standardized() {
        let mut truth = SimConfig::paper(100, 5, 5, 1.0, CovariancePreset::Small, 1).unwrap();
        truth.b_true = Array2::zeros((6, 1));
        let mut params = ModelParams::zeros(8, 5, 1);
        params.loadings[[0, 0]] = 1.0;
        params.loadings[[1, 0]] = 1.0;
        let m = evaluate_selection(&params, &truth).unwrap();
        assert!((m.frob_std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn c_index_examples() {
        assert_eq!(c_index(&[2.0, 1.0], &[1.0, 2.0], &[true, true]).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], &[true, true, true]).unwrap(), 0.5);
        assert_eq!(c_index(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], &[true, true, true]).unwrap(), 1.0);
        assert!(matches!(
            c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
            Err(Error::NoComparablePairs)
        ));
    }

    #[test]
    fn c_index_brute_force() {
        let risk = array![0.3, -1.2, 2.0, 0.3, 0.9];
        let times = [2.0, 0.5, 1.5, 3.0, 0.7];
        let status = [true, false, true, true, false];
        let mut conc = 0.0;
        let mut total = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if status[i] && times[i] < times[j] {
                    total += 1.0;
                    conc += if risk[i] > risk[j] { 1.0 } else if risk[i] == risk[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let got = c_index(risk.as_slice().unwrap(), &times, &status).unwrap();
        assert_eq!(got, conc / total);
        let shifted: Vec<f64> = risk.iter().map(|r| (3.0 * r).exp()).collect();
        assert_eq!(c_index(&shifted, &times, &status).unwrap(), got);
    }

    #[test]
    fn summary_of_one_replicate_is_that_replicate() {
        let m = SelectionMetrics {
            tp_fixed: 80.0,
            fp_fixed: 5.0,
            tp_random: 100.0,
            fp_random: 0.0,
            mean_abs_dev: 0.2,
            frob_std: 0.7,
            censor_rate: 0.15,
            runtime_secs: 12.0,
        };
        let rec = ReplicateRecord { replicate: 0, seed: 1, r_used: Some(3), metrics: Some(m.clone()), error: None };
        let s = summarize(&[rec]);
        assert_eq!((s.tp_fixed, s.fp_fixed, s.tp_random, s.fp_random), (80.0, 5.0, 100.0, 0.0));
        assert_eq!((s.mean_abs_dev, s.frob_std, s.median_runtime_secs), (0.2, 0.7, 12.0));
    }
}
