//! The regression-mixture model.
//!
//! Each cluster `k` generates curves as `y = X beta_k + e` with
//! `e ~ N(0, sigma2_k I_m)`. Everything here works in log space; with tens of
//! observations per curve the raw densities underflow long before anything
//! interesting happens.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisKind, BasisSpec, DesignMatrix};
use crate::error::{Error, Result};

/// Lower bound applied to every noise variance estimate.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Tolerance used when checking that probability vectors sum to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-10;

/// A set of `n` curves observed at `m` points each.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    ids: Vec<String>,
    true_labels: Option<Vec<usize>>,
}

impl CurveSet {
    /// `x` and `y` are `n x m`, one curve per row.
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, true_labels: Option<Vec<usize>>) -> Result<Self> {
        let ids = (1..=x.nrows()).map(|i| i.to_string()).collect();
        Self::with_ids(x, y, ids, true_labels)
    }

    /// All curves sampled on the same grid.
    pub fn with_shared_grid(
        grid: &[f64],
        y: DMatrix<f64>,
        true_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if grid.len() != y.ncols() {
            return Err(Error::input(format!(
                "grid has {} points but curves have {}",
                grid.len(),
                y.ncols()
            )));
        }
        let x = DMatrix::from_fn(y.nrows(), grid.len(), |_, j| grid[j]);
        Self::new(x, y, true_labels)
    }

    pub fn with_ids(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        ids: Vec<String>,
        true_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let (n, m) = y.shape();
        if x.shape() != (n, m) {
            return Err(Error::input(format!(
                "input grid is {:?} but responses are {:?}",
                x.shape(),
                (n, m)
            )));
        }
        if n < 1 {
            return Err(Error::input("a curve set needs at least one curve"));
        }
        if m < 2 {
            return Err(Error::input("each curve needs at least two observations"));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("curve data contains non-finite values"));
        }
        if ids.len() != n {
            return Err(Error::input(format!("{} ids for {n} curves", ids.len())));
        }
        if let Some(labels) = &true_labels {
            if labels.len() != n {
                return Err(Error::input(format!(
                    "{} labels for {n} curves",
                    labels.len()
                )));
            }
        }
        Ok(Self {
            x,
            y,
            ids,
            true_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn curve_x(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn curve_y(&self, i: usize) -> DVector<f64> {
        self.y.row(i).transpose()
    }

    /// The common grid, if every curve is sampled at the same inputs.
    pub fn shared_grid(&self) -> Option<Vec<f64>> {
        let first = self.x.row(0);
        self.x
            .row_iter()
            .all(|row| row == first)
            .then(|| first.iter().copied().collect())
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x.min(), self.x.max())
    }

    /// Design matrices for every curve.
    ///
    /// A B-spline basis without an explicit boundary is pinned to the range of
    /// the whole curve set so all curves share one knot vector.
    pub fn designs(&self, basis: &BasisSpec) -> Result<CurveDesigns> {
        let mut basis = basis.clone();
        if basis.kind == BasisKind::Bspline && basis.boundary.is_none() {
            let (lo, hi) = self.x_range();
            basis.boundary = Some((lo, hi));
        }
        let mats = match self.shared_grid() {
            Some(grid) => vec![basis.design(&grid)?],
            None => (0..self.n())
                .map(|i| basis.design(&self.curve_x(i)))
                .collect::<Result<_>>()?,
        };
        Ok(CurveDesigns { basis, mats })
    }
}

/// Per-curve design matrices; a single matrix when the grid is shared.
#[derive(Debug, Clone)]
pub struct CurveDesigns {
    basis: BasisSpec,
    mats: Vec<DesignMatrix>,
}

impl CurveDesigns {
    pub fn get(&self, i: usize) -> &DesignMatrix {
        if self.mats.len() == 1 {
            &self.mats[0]
        } else {
            &self.mats[i]
        }
    }

    pub fn is_shared(&self) -> bool {
        self.mats.len() == 1
    }

    /// The resolved basis, with any B-spline boundary filled in.
    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn n_coefficients(&self) -> usize {
        self.mats[0].ncols()
    }
}

/// Mixing proportions, regression coefficients and noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub pi: Vec<f64>,
    pub beta: Vec<DVector<f64>>,
    pub sigma2: Vec<f64>,
}

impl MixtureParams {
    pub fn new(pi: Vec<f64>, beta: Vec<DVector<f64>>, sigma2: Vec<f64>) -> Result<Self> {
        let params = Self { pi, beta, sigma2 };
        params.validate()?;
        Ok(params)
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.beta.first().map_or(0, |b| b.len())
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 {
            return Err(Error::param("mixture needs at least one component"));
        }
        if self.beta.len() != k || self.sigma2.len() != k {
            return Err(Error::param(format!(
                "component count mismatch: {} proportions, {} coefficient vectors, {} variances",
                k,
                self.beta.len(),
                self.sigma2.len()
            )));
        }
        if self.pi.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::param(
                "mixing proportions must be finite and non-negative",
            ));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::param(format!("mixing proportions sum to {total}")));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::param("noise variances must be positive and finite"));
        }
        let d = self.dim();
        if self.beta.iter().any(|b| b.len() != d) {
            return Err(Error::param("coefficient vectors have different lengths"));
        }
        if self
            .beta
            .iter()
            .flat_map(|b| b.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::param("regression coefficients must be finite"));
        }
        Ok(())
    }

    /// Keeps the listed components, in order, without renormalizing.
    pub(crate) fn select(&self, kept: &[usize]) -> Self {
        Self {
            pi: kept.iter().map(|&k| self.pi[k]).collect(),
            beta: kept.iter().map(|&k| self.beta[k].clone()).collect(),
            sigma2: kept.iter().map(|&k| self.sigma2[k]).collect(),
        }
    }
}

/// `n x K` posterior membership probabilities.
///
/// The log-probabilities are kept alongside so that dropping columns and
/// renormalizing stays exact even where the probabilities underflowed to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    tau: DMatrix<f64>,
    log_tau: DMatrix<f64>,
}

impl PosteriorMatrix {
    /// Normalizes each row of unnormalized log-weights with log-sum-exp.
    /// Returns the matrix and the per-row normalizers.
    pub fn from_log_weights(log_weights: DMatrix<f64>) -> Result<(Self, Vec<f64>)> {
        if log_weights
            .iter()
            .any(|v| v.is_nan() || *v == f64::INFINITY)
        {
            return Err(Error::input("log-weights contain NaN or +inf"));
        }
        let mut log_tau = log_weights;
        let mut normalizers = Vec::with_capacity(log_tau.nrows());
        for mut row in log_tau.row_iter_mut() {
            let values: Vec<f64> = row.iter().copied().collect();
            let lse = log_sum_exp(&values);
            if !lse.is_finite() {
                return Err(Error::input(
                    "a curve has zero weight under every component",
                ));
            }
            row.add_scalar_mut(-lse);
            normalizers.push(lse);
        }
        let tau = log_tau.map(f64::exp);
        Ok((Self { tau, log_tau }, normalizers))
    }

    /// Wraps an explicit probability matrix; rows must sum to one.
    pub fn from_probabilities(tau: DMatrix<f64>) -> Result<Self> {
        if tau.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input("posterior entries must lie in [0, 1]"));
        }
        for (i, row) in tau.row_iter().enumerate() {
            if (row.sum() - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::input(format!(
                    "posterior row {i} sums to {}",
                    row.sum()
                )));
            }
        }
        let log_tau = tau.map(f64::ln);
        Ok(Self { tau, log_tau })
    }

    pub fn tau(&self) -> &DMatrix<f64> {
        &self.tau
    }

    pub fn log_tau(&self) -> &DMatrix<f64> {
        &self.log_tau
    }

    pub fn n(&self) -> usize {
        self.tau.nrows()
    }

    pub fn k(&self) -> usize {
        self.tau.ncols()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.tau.column(k).iter().copied().collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.tau.column_iter().map(|c| c.sum()).collect()
    }

    /// Drops every column not in `kept` and renormalizes each row.
    pub fn keep_columns(&self, kept: &[usize]) -> Self {
        let mut log_weights = self.log_tau.select_columns(kept.iter());
        // A row with no mass left on the survivors is shared evenly.
        for mut row in log_weights.row_iter_mut() {
            if row.iter().all(|v| *v == f64::NEG_INFINITY) {
                row.fill(0.0);
            }
        }
        Self::from_log_weights(log_weights)
            .expect("rows have finite mass")
            .0
    }
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log N(y; X beta, sigma2 I_m)`.
pub fn log_component_density(
    y: &DVector<f64>,
    design: &DesignMatrix,
    beta: &DVector<f64>,
    sigma2: f64,
) -> Result<f64> {
    if !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(Error::param(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    if design.nrows() != y.len() || design.ncols() != beta.len() {
        return Err(Error::input(format!(
            "dimension mismatch: design {}x{}, response {}, coefficients {}",
            design.nrows(),
            design.ncols(),
            y.len(),
            beta.len()
        )));
    }
    let rss = (y - design.apply(beta)).norm_squared();
    Ok(gaussian_log_density(rss, y.len(), sigma2))
}

fn gaussian_log_density(rss: f64, m: usize, sigma2: f64) -> f64 {
    -0.5 * m as f64 * (2.0 * PI * sigma2).ln() - rss / (2.0 * sigma2)
}

/// Posteriors plus the observed-data log-likelihood they come with.
#[derive(Debug, Clone)]
pub struct EStep {
    pub posterior: PosteriorMatrix,
    pub loglik: f64,
}

/// Squared residual norms `||y_i - X_i beta_k||^2`, `n x K`.
pub fn residual_norms(
    params: &MixtureParams,
    data: &CurveSet,
    designs: &CurveDesigns,
) -> DMatrix<f64> {
    let (n, k) = (data.n(), params.k());
    let mut rss = DMatrix::zeros(n, k);
    if designs.is_shared() {
        let design = designs.get(0);
        for (c, beta) in params.beta.iter().enumerate() {
            let fitted = design.apply(beta);
            for i in 0..n {
                rss[(i, c)] = data
                    .y()
                    .row(i)
                    .iter()
                    .zip(fitted.iter())
                    .map(|(y, f)| (y - f) * (y - f))
                    .sum();
            }
        }
    } else {
        for i in 0..n {
            let y = data.curve_y(i);
            for (c, beta) in params.beta.iter().enumerate() {
                rss[(i, c)] = (&y - designs.get(i).apply(beta)).norm_squared();
            }
        }
    }
    rss
}

/// Posterior probabilities and log-likelihood in one pass.
pub fn e_step(params: &MixtureParams, data: &CurveSet, designs: &CurveDesigns) -> Result<EStep> {
    params.validate()?;
    if params.dim() != designs.n_coefficients() {
        return Err(Error::param(format!(
            "coefficients have length {} but the basis has {} columns",
            params.dim(),
            designs.n_coefficients()
        )));
    }
    let m = data.m();
    let rss = residual_norms(params, data, designs);
    let log_pi: Vec<f64> = params.pi.iter().map(|p| p.ln()).collect();
    let log_weights = DMatrix::from_fn(data.n(), params.k(), |i, c| {
        log_pi[c] + gaussian_log_density(rss[(i, c)], m, params.sigma2[c])
    });
    let (posterior, normalizers) = PosteriorMatrix::from_log_weights(log_weights)?;
    Ok(EStep {
        posterior,
        loglik: normalizers.iter().sum(),
    })
}

pub fn posterior_probabilities(
    params: &MixtureParams,
    data: &CurveSet,
    designs: &CurveDesigns,
) -> Result<PosteriorMatrix> {
    Ok(e_step(params, data, designs)?.posterior)
}

pub fn observed_log_likelihood(
    params: &MixtureParams,
    data: &CurveSet,
    designs: &CurveDesigns,
) -> Result<f64> {
    Ok(e_step(params, data, designs)?.loglik)
}

/// Entropy of the labels of `n` i.i.d. curves, `-n sum_k pi_k log pi_k`.
pub fn proportions_entropy(pi: &[f64], n: usize) -> Result<f64> {
    if let Some(p) = pi.iter().find(|p| p.is_nan() || **p < 0.0) {
        return Err(Error::param(format!("negative or NaN proportion {p}")));
    }
    Ok(-(n as f64) * sum_pi_log_pi(pi))
}

/// `sum_k pi_k log pi_k` with `0 log 0 = 0`.
pub(crate) fn sum_pi_log_pi(pi: &[f64]) -> f64 {
    pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum()
}

/// `L(psi) - lambda * H(z)`.
pub fn penalized_log_likelihood(
    params: &MixtureParams,
    data: &CurveSet,
    designs: &CurveDesigns,
    lambda: f64,
) -> Result<f64> {
    let loglik = observed_log_likelihood(params, data, designs)?;
    penalize(loglik, &params.pi, data.n(), lambda)
}

pub(crate) fn penalize(loglik: f64, pi: &[f64], n: usize, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::param(format!(
            "penalty weight must be non-negative, got {lambda}"
        )));
    }
    if lambda == 0.0 {
        return Ok(loglik);
    }
    Ok(loglik - lambda * proportions_entropy(pi, n)?)
}

/// Hard labels `argmax_k tau_ik` (zero-based). Ties go to the smallest index.
pub fn map_partition(tau: &PosteriorMatrix) -> Vec<usize> {
    argmax_rows(tau.tau())
}

pub fn argmax_rows(values: &DMatrix<f64>) -> Vec<usize> {
    values
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Standard,
    Robust,
}

/// State of a fit after one iteration (record 0 is the initial state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub k: usize,
    pub lambda: f64,
    pub loglik: f64,
    pub penalized_loglik: f64,
    pub pi: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

impl FitTrace {
    pub fn push(&mut self, record: IterationRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.iter < record.iter));
        self.records.push(record);
    }

    pub fn warn(&mut self, message: String) {
        self.warnings.push(message);
    }

    pub fn logliks(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loglik).collect()
    }

    pub fn ks(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.k).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub engine: Engine,
    pub basis: BasisSpec,
    pub params: MixtureParams,
    pub posterior: PosteriorMatrix,
    /// Zero-based cluster index per curve.
    pub labels: Vec<usize>,
    pub trace: FitTrace,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.params.k()
    }
}
