use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed effects, factor loadings and log baseline hazard increments.
///
/// The random-effect design of a subject is `z = (1, x[ranef_columns])`, so
/// row 0 of `loadings` is the random intercept and row `t > 0` belongs to
/// covariate `ranef_columns[t - 1]`. The log baseline hazard of interval `j`
/// is `psi_tilde[0]` for the first interval and `psi_tilde[0] + psi_tilde[j]`
/// otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub psi_tilde: Array1<f64>,
    pub beta: Array1<f64>,
    pub loadings: Array2<f64>,
    pub ranef_columns: Vec<usize>,
}

impl ModelParams {
    /// All-zero parameters with every covariate a random-effect candidate.
    pub fn zeros(n_intervals: usize, p: usize, r: usize) -> Self {
        Self::zeros_with_ranef(n_intervals, p, r, (0..p).collect())
    }

    pub fn zeros_with_ranef(n_intervals: usize, p: usize, r: usize, ranef_columns: Vec<usize>) -> Self {
        let q = ranef_columns.len() + 1;
        Self {
            psi_tilde: Array1::zeros(n_intervals),
            beta: Array1::zeros(p),
            loadings: Array2::zeros((q, r)),
            ranef_columns,
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.psi_tilde.len()
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn r(&self) -> usize {
        self.loadings.ncols()
    }

    /// Log baseline hazards `ψ_j` per interval.
    pub fn log_baseline(&self) -> Array1<f64> {
        let base = self.psi_tilde[0];
        Array1::from_shape_fn(self.n_intervals(), |j| {
            if j == 0 { base } else { base + self.psi_tilde[j] }
        })
    }

    /// `Σ = B Bᵀ`.
    pub fn sigma(&self) -> Array2<f64> {
        self.loadings.dot(&self.loadings.t())
    }

    pub fn selected_fixed(&self) -> Vec<usize> {
        self.beta
            .iter()
            .enumerate()
            .filter_map(|(l, &b)| (b != 0.0).then_some(l))
            .collect()
    }

    /// Rows of `B` with nonzero norm (0 is the random intercept).
    pub fn selected_random(&self) -> Vec<usize> {
        self.loadings
            .rows()
            .into_iter()
            .enumerate()
            .filter_map(|(t, row)| row.iter().any(|&v| v != 0.0).then_some(t))
            .collect()
    }

    /// Flattened `(ψ̃, β, vec B)` with `B` in row-major order.
    pub fn flatten(&self) -> Vec<f64> {
        self.psi_tilde
            .iter()
            .chain(self.beta.iter())
            .chain(self.loadings.iter())
            .copied()
            .collect()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let (j, p) = (self.n_intervals(), self.p());
        for (dst, src) in self
            .psi_tilde
            .iter_mut()
            .chain(self.beta.iter_mut())
            .chain(self.loadings.iter_mut())
            .zip(flat)
        {
            *dst = *src;
        }
        debug_assert_eq!(flat.len(), j + p + self.loadings.len());
    }

    /// Largest absolute change over coordinates nonzero in either iterate.
    pub fn max_change_on_support(&self, other: &ModelParams) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .filter(|(a, b)| **a != 0.0 || *b != 0.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_dims(&self, n_intervals: usize, p: usize) -> Result<()> {
        if self.n_intervals() != n_intervals || self.p() != p {
            return Err(Error::DimensionMismatch(format!(
                "params have J={} p={}, data have J={} p={}",
                self.n_intervals(),
                self.p(),
                n_intervals,
                p
            )));
        }
        if self.q() != self.ranef_columns.len() + 1 || self.r() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "loadings are {}x{} for {} random-effect columns",
                self.q(),
                self.r(),
                self.ranef_columns.len()
            )));
        }
        if self.ranef_columns.iter().any(|&c| c >= p) {
            return Err(Error::DimensionMismatch("random-effect column out of range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn baseline_and_selection() {
        let mut p = ModelParams::zeros(3, 2, 1);
        p.psi_tilde = array![-1.0, 0.5, 2.0];
        p.beta = array![0.0, 0.3];
        p.loadings = array![[1.0], [0.0], [0.2]];
        assert_eq!(p.log_baseline(), array![-1.0, -0.5, 1.0]);
        assert_eq!(p.selected_fixed(), vec![1]);
        assert_eq!(p.selected_random(), vec![0, 2]);
        let flat = p.flatten();
        let mut q = ModelParams::zeros(3, 2, 1);
        q.set_from_flat(&flat);
        assert_eq!(p, q);
    }

    #[test]
    fn support_change_ignores_common_zeros() {
        let a = ModelParams::zeros(2, 2, 1);
        let mut b = a.clone();
        b.beta[1] = 0.25;
        assert_eq!(a.max_change_on_support(&b), 0.25);
        assert_eq!(a.max_change_on_support(&a), 0.0);
    }
}
