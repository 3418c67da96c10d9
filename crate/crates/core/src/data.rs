//! Survival data, interval grids, and the long-form Poisson representation.
//!
//! A subject observed until `y` is split into one row per time interval it
//! survived at least part way through. Each row carries the exposure `t*`
//! spent in the interval and a death indicator `d`, so the piecewise
//! constant hazard likelihood becomes a Poisson likelihood with offset
//! `log t*`.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column centers and scales used to standardize covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub centers: Array1<f64>,
    pub scales: Array1<f64>,
}

impl Standardization {
    /// Maps coefficients fitted on standardized covariates back to the
    /// original covariate scale.
    pub fn coefficients_to_original(&self, beta: ArrayView1<f64>) -> Array1<f64> {
        &beta / &self.scales
    }

    pub fn coefficients_to_standardized(&self, beta: ArrayView1<f64>) -> Array1<f64> {
        &beta * &self.scales
    }

    /// Shift of the log baseline hazard implied by un-centering covariates.
    pub fn intercept_shift(&self, beta_standardized: ArrayView1<f64>) -> f64 {
        -beta_standardized
            .iter()
            .zip(self.centers.iter().zip(self.scales.iter()))
            .map(|(b, (c, s))| b * c / s)
            .sum::<f64>()
    }
}

/// Centers each column to mean zero and scales it to `N^-1 Σ x² = 1`.
pub fn standardize_covariates(x: &Array2<f64>) -> Result<(Array2<f64>, Standardization)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "need at least 2 rows to standardize, got {n}"
        )));
    }
    let mut out = x.clone();
    let mut centers = Array1::zeros(x.ncols());
    let mut scales = Array1::zeros(x.ncols());
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let mean = col.sum() / n as f64;
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let scale = var.sqrt();
        if !(scale > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::ZeroVarianceColumn(j));
        }
        col.mapv_inplace(|v| v / scale);
        centers[j] = mean;
        scales[j] = scale;
    }
    Ok((out, Standardization { centers, scales }))
}

/// Observed survival data for subjects nested in groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    groups: Vec<usize>,
    group_labels: Vec<String>,
    times: Vec<f64>,
    status: Vec<bool>,
    covariates: Array2<f64>,
    covariate_names: Vec<String>,
    standardization: Option<Standardization>,
}

impl SurvivalDataset {
    /// `groups` holds zero-based group indices; every index in `0..K` must
    /// occur and `K >= 2`.
    pub fn new(
        groups: Vec<usize>,
        times: Vec<f64>,
        status: Vec<bool>,
        covariates: Array2<f64>,
    ) -> Result<Self> {
        let k = groups.iter().copied().max().map_or(0, |m| m + 1);
        let labels = (0..k).map(|g| (g + 1).to_string()).collect();
        let names = (0..covariates.ncols()).map(|j| format!("x{}", j + 1)).collect();
        Self::with_labels(groups, labels, times, status, covariates, names)
    }

    pub fn with_labels(
        groups: Vec<usize>,
        group_labels: Vec<String>,
        times: Vec<f64>,
        status: Vec<bool>,
        covariates: Array2<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = times.len();
        if groups.len() != n || status.len() != n || covariates.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} times, {} status, {} groups, {} covariate rows",
                n,
                status.len(),
                groups.len(),
                covariates.nrows()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::DimensionMismatch(
                "covariate names do not match covariate columns".into(),
            ));
        }
        for (i, (&t, &d)) in times.iter().zip(&status).enumerate() {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidData(format!("time {t} of subject {i} is invalid")));
            }
            if d && t <= 0.0 {
                return Err(Error::InvalidData(format!(
                    "subject {i} has an event at time 0"
                )));
            }
        }
        if !status.iter().any(|&d| d) {
            return Err(Error::InvalidData("no events observed".into()));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate value".into()));
        }
        let k = group_labels.len();
        if k < 2 {
            return Err(Error::InvalidData(format!("need at least 2 groups, found {k}")));
        }
        let mut counts = vec![0usize; k];
        for &g in &groups {
            if g >= k {
                return Err(Error::InvalidData(format!("group index {g} out of range")));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidData(format!("group {empty} has no subjects")));
        }
        Ok(Self {
            groups,
            group_labels,
            times,
            status,
            covariates,
            covariate_names,
            standardization: None,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.times.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.status.iter().filter(|&&d| d).count()
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn status(&self) -> &[bool] {
        &self.status
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.is_some()
    }

    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.n_events() as f64 / self.n_subjects() as f64
    }

    /// Returns a copy with standardized covariates. Standardizing twice keeps
    /// the constants of the first pass.
    pub fn standardized(&self) -> Result<Self> {
        if self.standardization.is_some() {
            return Ok(self.clone());
        }
        let (x, constants) = standardize_covariates(&self.covariates)?;
        Ok(Self {
            covariates: x,
            standardization: Some(constants),
            ..self.clone()
        })
    }

    /// Event times (status 1 only), in subject order.
    pub fn event_times(&self) -> Vec<f64> {
        self.times
            .iter()
            .zip(&self.status)
            .filter_map(|(&t, &d)| d.then_some(t))
            .collect()
    }
}

/// Interior cut points `0 < τ_1 < … < τ_{J-1}`; the last interval is
/// unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalGrid {
    cutpoints: Vec<f64>,
}

impl IntervalGrid {
    pub fn new(cutpoints: Vec<f64>) -> Result<Self> {
        if cutpoints.is_empty() {
            return Err(Error::InvalidGrid("need at least one cut point (J >= 2)".into()));
        }
        if !cutpoints.iter().all(|c| c.is_finite()) || cutpoints[0] <= 0.0 {
            return Err(Error::InvalidGrid("cut points must be finite and positive".into()));
        }
        if cutpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("cut points must be strictly increasing".into()));
        }
        Ok(Self { cutpoints })
    }

    pub fn cutpoints(&self) -> &[f64] {
        &self.cutpoints
    }

    /// Number of intervals J.
    pub fn n_intervals(&self) -> usize {
        self.cutpoints.len() + 1
    }

    /// Lower bound of zero-based interval `j`.
    pub fn lower(&self, j: usize) -> f64 {
        if j == 0 { 0.0 } else { self.cutpoints[j - 1] }
    }

    /// Upper bound of zero-based interval `j` (infinite for the last one).
    pub fn upper(&self, j: usize) -> f64 {
        self.cutpoints.get(j).copied().unwrap_or(f64::INFINITY)
    }

    /// Zero-based interval containing `t` under `[τ_{j-1}, τ_j)`.
    pub fn interval_of(&self, t: f64) -> usize {
        self.cutpoints.partition_point(|&c| c <= t)
    }
}

/// Linear-interpolation empirical quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cut points at the `j/J` quantiles of the event times, so each interval
/// holds roughly the same number of events.
pub fn compute_cutpoints(times: &[f64], status: &[bool], n_intervals: usize) -> Result<IntervalGrid> {
    if n_intervals < 2 {
        return Err(Error::InvalidParameter(format!(
            "interval count must be at least 2, got {n_intervals}"
        )));
    }
    if times.len() != status.len() {
        return Err(Error::DimensionMismatch("times and status lengths differ".into()));
    }
    let mut events: Vec<f64> = times
        .iter()
        .zip(status)
        .filter_map(|(&t, &d)| d.then_some(t))
        .collect();
    if events.len() < n_intervals {
        return Err(Error::TooFewEvents { needed: n_intervals, found: events.len() });
    }
    events.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..n_intervals)
        .map(|j| quantile_sorted(&events, j as f64 / n_intervals as f64))
        .collect();
    // the first interval must hold at least the earliest event
    if cuts[0] <= events[0] || cuts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::DegenerateQuantiles);
    }
    IntervalGrid::new(cuts)
}

/// One interval-level observation of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongFormRow {
    pub subject: usize,
    pub group: usize,
    /// Zero-based interval index.
    pub interval: usize,
    pub exposure: f64,
    pub death: bool,
}

impl LongFormRow {
    pub fn offset(&self) -> f64 {
        self.exposure.ln()
    }

    /// Reference-coded interval indicators `v` of length `J`: the first entry
    /// is always 1 and entry `j > 1` marks interval `j`.
    pub fn interval_dummies(&self, n_intervals: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_intervals];
        v[0] = 1.0;
        v[self.interval] = 1.0;
        v
    }
}

/// Interval-expanded data; rows of each subject are contiguous and ordered
/// by interval.
#[derive(Debug, Clone)]
pub struct LongFormDataset {
    rows: Vec<LongFormRow>,
    covariates: Arc<Array2<f64>>,
    subject_groups: Vec<usize>,
    subject_status: Vec<bool>,
    n_groups: usize,
    n_intervals: usize,
}

/// Expands every subject into its interval rows.
pub fn expand_long_form(data: &SurvivalDataset, grid: &IntervalGrid) -> LongFormDataset {
    let j_count = grid.n_intervals();
    let mut rows = Vec::with_capacity(data.n_subjects() * 2);
    for (i, (&y, &delta)) in data.times.iter().zip(&data.status).enumerate() {
        for j in 0..j_count {
            let lo = grid.lower(j);
            let hi = grid.upper(j);
            let exposure = (y.min(hi) - lo).max(0.0);
            if exposure <= 0.0 {
                break;
            }
            rows.push(LongFormRow {
                subject: i,
                group: data.groups[i],
                interval: j,
                exposure,
                // an event on a cut point stays with the interval it closes
                death: delta && y <= hi,
            });
        }
    }
    LongFormDataset {
        rows,
        covariates: Arc::new(data.covariates.clone()),
        subject_groups: data.groups.clone(),
        subject_status: data.status.clone(),
        n_groups: data.n_groups(),
        n_intervals: j_count,
    }
}

impl LongFormDataset {
    pub fn rows(&self) -> &[LongFormRow] {
        &self.rows
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_groups.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn covariate_row(&self, subject: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(subject)
    }

    pub fn subject_groups(&self) -> &[usize] {
        &self.subject_groups
    }

    pub fn subject_status(&self) -> &[bool] {
        &self.subject_status
    }

    /// Rows belonging to group `k`.
    pub fn group_rows(&self, k: usize) -> Vec<LongFormRow> {
        self.rows.iter().filter(|r| r.group == k).copied().collect()
    }

    /// Events and total exposure per interval.
    pub fn interval_totals(&self) -> (Vec<f64>, Vec<f64>) {
        let mut events = vec![0.0; self.n_intervals];
        let mut exposure = vec![0.0; self.n_intervals];
        for r in &self.rows {
            exposure[r.interval] += r.exposure;
            if r.death {
                events[r.interval] += 1.0;
            }
        }
        (events, exposure)
    }

    /// Restricts to the given subjects, renumbered in the order given, all
    /// placed in a single group.
    pub fn subset_single_group(&self, subjects: &[usize]) -> LongFormDataset {
        let mut new_index = vec![usize::MAX; self.n_subjects()];
        for (new, &old) in subjects.iter().enumerate() {
            new_index[old] = new;
        }
        let rows = self
            .rows
            .iter()
            .filter(|r| new_index[r.subject] != usize::MAX)
            .map(|r| LongFormRow { subject: new_index[r.subject], group: 0, ..*r })
            .collect::<Vec<_>>();
        let mut rows = rows;
        rows.sort_by_key(|r| (r.subject, r.interval));
        let covariates = self.covariates.select(Axis(0), subjects);
        LongFormDataset {
            rows,
            covariates: Arc::new(covariates),
            subject_groups: vec![0; subjects.len()],
            subject_status: subjects.iter().map(|&i| self.subject_status[i]).collect(),
            n_groups: 1,
            n_intervals: self.n_intervals,
        }
    }

    /// Keeps only the listed covariate columns.
    pub fn with_covariate_columns(&self, columns: &[usize]) -> LongFormDataset {
        LongFormDataset {
            covariates: Arc::new(self.covariates.select(Axis(1), columns)),
            ..self.clone()
        }
    }
}

/// Top-scoring-pair indicators: entry `(i, m)` is 1 when column `A` of pair
/// `m` strictly exceeds column `B` in row `i`.
pub fn tsp_transform(expr: &Array2<f64>, pairs: &[(usize, usize)]) -> Result<Array2<f64>> {
    let g = expr.ncols();
    for &(a, b) in pairs {
        if a >= g || b >= g || a == b {
            return Err(Error::InvalidPair(a, b));
        }
    }
    Ok(Array2::from_shape_fn((expr.nrows(), pairs.len()), |(i, m)| {
        let (a, b) = pairs[m];
        if expr[[i, a]] > expr[[i, b]] { 1.0 } else { 0.0 }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn paper_grid() -> IntervalGrid {
        IntervalGrid::new(vec![0.5, 1.0, 1.5, 2.0]).unwrap()
    }

    fn single(y: f64, delta: bool) -> LongFormDataset {
        let data = SurvivalDataset::new(
            vec![0, 1],
            vec![y, 1.0],
            vec![delta, true],
            array![[0.0], [1.0]],
        )
        .unwrap();
        let mut lf = expand_long_form(&data, &paper_grid());
        lf.rows.retain(|r| r.subject == 0);
        lf
    }

    #[test]
    fn standardize_examples() {
        let (x, c) = standardize_covariates(&array![[1.0], [-1.0]]).unwrap();
        assert_eq!(x, array![[1.0], [-1.0]]);
        assert_eq!((c.centers[0], c.scales[0]), (0.0, 1.0));

        let (x, c) = standardize_covariates(&array![[0.0], [2.0]]).unwrap();
        assert_eq!(x, array![[-1.0], [1.0]]);
        assert_eq!((c.centers[0], c.scales[0]), (1.0, 1.0));

        let err = standardize_covariates(&array![[5.0], [5.0]]).unwrap_err();
        assert!(matches!(err, Error::ZeroVarianceColumn(0)));
    }

    #[test]
    fn cutpoints_examples() {
        let t: Vec<f64> = (1..=8).map(f64::from).collect();
        let grid = compute_cutpoints(&t, &[true; 8], 4).unwrap();
        for (a, b) in grid.cutpoints().iter().zip([2.75, 4.5, 6.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            compute_cutpoints(&[1.0, 2.0], &[true, true], 5),
            Err(Error::TooFewEvents { .. })
        ));
        assert!(matches!(
            compute_cutpoints(&[3.0; 6], &[true; 6], 2),
            Err(Error::DegenerateQuantiles)
        ));
    }

    #[test]
    fn censored_subjects_do_not_shape_cutpoints() {
        let times = [1.0, 2.0, 3.0, 4.0, 100.0, 200.0];
        let status = [true, true, true, true, false, false];
        let grid = compute_cutpoints(&times, &status, 2).unwrap();
        assert!((grid.cutpoints()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn expansion_examples() {
        let rows = single(0.7, true).rows;
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].interval, rows[0].death), (0, false));
        assert!((rows[0].exposure - 0.5).abs() < 1e-15);
        assert_eq!((rows[1].interval, rows[1].death), (1, true));
        assert!((rows[1].exposure - 0.2).abs() < 1e-12);

        let rows = single(0.3, false).rows;
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].interval, rows[0].death), (0, false));
        assert!((rows[0].exposure - 0.3).abs() < 1e-15);

        let rows = single(2.5, true).rows;
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert!((r.exposure - 0.5).abs() < 1e-12);
            assert_eq!(r.death, r.interval == 4);
        }
    }

    #[test]
    fn event_on_cutpoint_closes_its_interval() {
        let rows = single(1.0, true).rows;
        assert_eq!(rows.len(), 2);
        assert!(!rows[0].death);
        assert!(rows[1].death);
        assert_eq!(rows[1].interval, 1);
        assert!((rows[1].exposure - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dummies_are_reference_coded() {
        let r = LongFormRow { subject: 0, group: 0, interval: 0, exposure: 1.0, death: false };
        assert_eq!(r.interval_dummies(3), vec![1.0, 0.0, 0.0]);
        let r = LongFormRow { interval: 2, ..r };
        assert_eq!(r.interval_dummies(3), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn tsp_examples() {
        let expr = array![[5.0, 3.0], [3.0, 3.0], [1.0, 4.0]];
        let out = tsp_transform(&expr, &[(0, 1)]).unwrap();
        assert_eq!(out.column(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(tsp_transform(&expr, &[(0, 0)]), Err(Error::InvalidPair(0, 0))));
        assert!(matches!(tsp_transform(&expr, &[(0, 2)]), Err(Error::InvalidPair(0, 2))));
    }

    #[test]
    fn dataset_validation() {
        let x = array![[0.0], [1.0]];
        assert!(SurvivalDataset::new(vec![0, 0], vec![1.0, 2.0], vec![true, false], x.clone()).is_err());
        assert!(SurvivalDataset::new(vec![0, 1], vec![1.0, 2.0], vec![false, false], x.clone()).is_err());
        assert!(SurvivalDataset::new(vec![0, 1], vec![-1.0, 2.0], vec![true, false], x.clone()).is_err());
        assert!(SurvivalDataset::new(vec![0, 1], vec![0.0, 2.0], vec![true, false], x.clone()).is_err());
        assert!(SurvivalDataset::new(vec![0, 1], vec![0.0, 2.0], vec![false, true], x).is_ok());
    }

    proptest! {
        #[test]
        fn exposures_and_deaths_add_up(
            y in 0.0f64..10.0,
            delta: bool,
            gaps in proptest::collection::vec(0.01f64..2.0, 1..8),
        ) {
            let delta = delta && y > 0.0;
            let cuts: Vec<f64> = gaps.iter().scan(0.0, |acc, g| { *acc += g; Some(*acc) }).collect();
            let grid = IntervalGrid::new(cuts).unwrap();
            let data = SurvivalDataset::new(
                vec![0, 1], vec![y, 1.0], vec![delta, true], array![[0.0], [1.0]],
            ).unwrap();
            let lf = expand_long_form(&data, &grid);
            let rows: Vec<_> = lf.rows().iter().filter(|r| r.subject == 0).collect();
            let total: f64 = rows.iter().map(|r| r.exposure).sum();
            prop_assert!((total - y).abs() <= 1e-12);
            prop_assert_eq!(rows.iter().filter(|r| r.death).count(), usize::from(delta));
            prop_assert!(rows.iter().all(|r| r.exposure > 0.0));
        }

        #[test]
        fn destandardize_round_trips(
            beta in proptest::collection::vec(-5.0f64..5.0, 3),
            scales in proptest::collection::vec(0.1f64..10.0, 3),
        ) {
            let s = Standardization { centers: Array1::zeros(3), scales: Array1::from(scales) };
            let b = Array1::from(beta);
            let back = s.coefficients_to_standardized(s.coefficients_to_original(b.view()).view());
            for (a, c) in back.iter().zip(b.iter()) {
                prop_assert!((a - c).abs() <= 1e-12);
            }
        }
    }
}
