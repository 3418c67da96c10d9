use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::data::{compute_cutpoints, expand_long_form, LongFormDataset, SurvivalDataset};
use crate::params::ModelParams;
use crate::rng;
use crate::sampler::PosteriorSamples;

/// Exponential survival data with standard normal covariates and uniform
/// censoring on (0, 3), cut into `j` quantile intervals.
pub fn random_long(seed: u64, n: usize, k: usize, p: usize, j: usize) -> LongFormDataset {
    let data = random_dataset(seed, n, k, p);
    let grid = compute_cutpoints(data.times(), data.status(), j).unwrap();
    expand_long_form(&data, &grid)
}

pub fn random_dataset(seed: u64, n: usize, k: usize, p: usize) -> SurvivalDataset {
    let mut g = rng::stream(seed, &[0xDA7A]);
    let x = Array2::from_shape_fn((n, p), |_| g.sample::<f64, _>(StandardNormal));
    let beta: Vec<f64> = (0..p).map(|l| if l % 2 == 0 { 0.4 } else { -0.3 }).collect();
    let mut times = Vec::with_capacity(n);
    let mut status = Vec::with_capacity(n);
    for i in 0..n {
        let eta: f64 = (0..p).map(|l| x[[i, l]] * beta[l]).sum();
        let t = Exp::new(eta.exp()).unwrap().sample(&mut g);
        let c = g.gen_range(0.0..3.0);
        times.push(t.min(c).max(1e-6));
        status.push(t < c);
    }
    let groups = (0..n).map(|i| i % k).collect();
    SurvivalDataset::new(groups, times, status, x).unwrap().standardized().unwrap()
}

pub fn random_params(seed: u64, j: usize, p: usize, r: usize) -> ModelParams {
    let mut g = rng::stream(seed, &[0xBA5E]);
    let mut params = ModelParams::zeros(j, p, r);
    params.psi_tilde = Array1::from_shape_fn(j, |_| g.gen_range(-1.0..0.5));
    params.beta = Array1::from_shape_fn(p, |_| g.gen_range(-0.5..0.5));
    params.loadings = Array2::from_shape_fn((p + 1, r), |_| g.gen_range(-0.4..0.4));
    params
}

pub fn random_samples(seed: u64, k: usize, m: usize, r: usize) -> PosteriorSamples {
    let mut g = rng::stream(seed, &[0x5A3]);
    PosteriorSamples::from_draws(
        (0..k)
            .map(|_| Array2::from_shape_fn((m, r), |_| g.sample::<f64, _>(StandardNormal)))
            .collect(),
    )
}

/// Poisson regression of the long-form rows on `(v, x)` with offset
/// `log t*`, by Newton iterations. Returns `(ψ̃, β)`.
pub fn irls_poisson(long: &LongFormDataset) -> (Vec<f64>, Vec<f64>) {
    use nalgebra::{DMatrix, DVector};
    let j = long.n_intervals();
    let p = long.n_covariates();
    let dim = j + p;
    let design: Vec<Vec<f64>> = long
        .rows()
        .iter()
        .map(|row| {
            let mut v = row.interval_dummies(j);
            v.extend(long.covariate_row(row.subject).iter());
            v
        })
        .collect();
    let mut coef = DVector::<f64>::zeros(dim);
    for _ in 0..100 {
        let mut info = DMatrix::<f64>::zeros(dim, dim);
        let mut score = DVector::<f64>::zeros(dim);
        for (row, v) in long.rows().iter().zip(&design) {
            let eta: f64 = row.offset() + v.iter().zip(coef.iter()).map(|(a, b)| a * b).sum::<f64>();
            let mu = eta.exp();
            let d = if row.death { 1.0 } else { 0.0 };
            for a in 0..dim {
                score[a] += v[a] * (d - mu);
                for b in 0..dim {
                    info[(a, b)] += v[a] * v[b] * mu;
                }
            }
        }
        let step = info.lu().solve(&score).expect("nonsingular information");
        coef += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    (coef.as_slice()[..j].to_vec(), coef.as_slice()[j..].to_vec())
}
