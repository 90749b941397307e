//! Robust EM for regression mixtures.
//!
//! The fit starts with one cluster per curve and maximizes the
//! entropy-penalized log-likelihood
//!
//! ```text
//! J(lambda, psi) = L(psi) + lambda * n * sum_k pi_k log pi_k
//! ```
//!
//! Each iteration runs, in this order:
//!
//! 1. E-step: posteriors `tau` at the current parameters.
//! 2. Proportions: `pi_k <- mean_i tau_ik + lambda pi_k (log pi_k - sum_h pi_h log pi_h)`.
//! 3. Penalty weight: `lambda` adapted from the change in proportions.
//! 4. Clusters with `pi_k < 1/n` are discarded; `pi` and the rows of `tau`
//!    are renormalized over the survivors.
//! 5. Weighted least-squares updates of `beta_k` and `sigma2_k`.
//! 6. Stop once `max_k ||beta_k(new) - beta_k(old)||` is below epsilon.
//!
//! The penalty makes clusters compete: a cluster whose log-proportion is
//! above the proportion-weighted mean grows, the others shrink until they
//! fall under the `1/n` threshold.

use nalgebra::DVector;

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::linalg::ordinary_least_squares;
use crate::model::{
    e_step, map_partition, penalize, sum_pi_log_pi, CurveDesigns, CurveSet, EStep, Engine,
    FitResult, FitTrace, IterationRecord, MixtureParams, PosteriorMatrix, VARIANCE_FLOOR,
};
use crate::standard::{m_step_proportions, regression_m_step};

#[derive(Debug, Clone, PartialEq)]
pub struct RobustFitConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Upper bound for the penalty weight, in `(0, 1]`.
    pub lambda_cap: f64,
    /// Replaces [`eta_default`] in the penalty-weight update.
    pub eta_override: Option<f64>,
}

impl Default for RobustFitConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_iter: 1000,
            lambda_cap: 1.0,
            eta_override: None,
        }
    }
}

impl RobustFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::param("epsilon must be positive"));
        }
        if self.max_iter < 1 {
            return Err(Error::param("max_iter must be at least 1"));
        }
        if !(self.lambda_cap > 0.0 && self.lambda_cap <= 1.0) {
            return Err(Error::param(format!(
                "lambda cap must lie in (0, 1], got {}",
                self.lambda_cap
            )));
        }
        if let Some(eta) = self.eta_override {
            if !eta.is_finite() || eta < 0.0 {
                return Err(Error::param(format!(
                    "eta must be finite and non-negative, got {eta}"
                )));
            }
        }
        Ok(())
    }
}

/// `min(1, 0.5^floor(m/2 - 1))` for `m` observations per curve.
pub fn eta_default(m: usize) -> f64 {
    let exponent = (m as f64 / 2.0 - 1.0).floor();
    0.5f64.powf(exponent).min(1.0)
}

/// The penalty's correction to each proportion,
/// `lambda pi_k (log pi_k - sum_h pi_h log pi_h)`; zero for empty clusters.
pub fn entropy_correction(pi_old: &[f64], lambda: f64) -> Vec<f64> {
    let mean_log = sum_pi_log_pi(pi_old);
    pi_old
        .iter()
        .map(|&p| {
            if p > 0.0 {
                lambda * p * (p.ln() - mean_log)
            } else {
                0.0
            }
        })
        .collect()
}

/// Penalized proportions update. Negative values are clamped to zero and the
/// result renormalized onto the simplex.
pub fn robust_proportions_update(tau: &PosteriorMatrix, pi_old: &[f64], lambda: f64) -> Vec<f64> {
    let mut pi: Vec<f64> = m_step_proportions(tau)
        .into_iter()
        .zip(entropy_correction(pi_old, lambda))
        .map(|(base, corr)| (base + corr).max(0.0))
        .collect();
    let total: f64 = pi.iter().sum();
    if total > 0.0 {
        pi.iter_mut().for_each(|p| *p /= total);
    } else {
        // Everything clamped: fall back to the unpenalized update.
        pi = m_step_proportions(tau);
    }
    pi
}

/// Adaptive penalty weight, `min(A, B, cap)` with
///
/// ```text
/// A = (1/K) sum_k exp(eta n |pi_new_k - pi_old_k|)
/// B = (1 - max_k mean_i tau_ik) / (-sum_k pi_old_k log pi_old_k)
/// ```
///
/// `B` is taken as infinite when the old proportions have zero entropy.
pub fn lambda_update(
    pi_new: &[f64],
    pi_old: &[f64],
    tau: &PosteriorMatrix,
    eta: f64,
    lambda_cap: f64,
) -> f64 {
    let n = tau.n() as f64;
    let k = pi_new.len() as f64;
    let a = pi_new
        .iter()
        .zip(pi_old)
        .map(|(new, old)| (eta * n * (new - old).abs()).exp())
        .sum::<f64>()
        / k;
    let entropy = -sum_pi_log_pi(pi_old);
    let b = if entropy > 0.0 {
        let max_mean = m_step_proportions(tau).into_iter().fold(0.0, f64::max);
        ((1.0 - max_mean) / entropy).max(0.0)
    } else {
        f64::INFINITY
    };
    a.min(b).min(lambda_cap)
}

/// Outcome of removing clusters whose proportion is below `1/n`.
#[derive(Debug, Clone)]
pub struct Discarded {
    pub params: MixtureParams,
    pub posterior: PosteriorMatrix,
    /// Indices (into the input) of the surviving clusters, in order.
    pub kept: Vec<usize>,
}

impl Discarded {
    pub fn k(&self) -> usize {
        self.kept.len()
    }
}

/// Relative slack under which a proportion counts as sitting exactly on the
/// `1/n` threshold.
const THRESHOLD_TIE: f64 = 1e-12;

/// Drops every cluster with `pi_k < 1/n` and renormalizes `pi` and each row
/// of `tau` over the survivors. The largest cluster always survives.
///
/// A proportion equal to `1/n` up to rounding, i.e. exactly one curve's worth
/// of mass, is also dropped. Without this, a set of exact duplicates sits on
/// the threshold forever.
pub fn discard_small_clusters(
    params: &MixtureParams,
    tau: &PosteriorMatrix,
    n: usize,
) -> Discarded {
    let threshold = (1.0 + THRESHOLD_TIE) / n as f64;
    let mut kept: Vec<usize> = (0..params.k())
        .filter(|&k| params.pi[k] > threshold)
        .collect();
    if kept.is_empty() {
        let mut largest = 0;
        for (k, &p) in params.pi.iter().enumerate() {
            if p > params.pi[largest] {
                largest = k;
            }
        }
        kept.push(largest);
    }
    let mut survivors = params.select(&kept);
    let total: f64 = survivors.pi.iter().sum();
    survivors.pi.iter_mut().for_each(|p| *p /= total);
    let posterior = if kept.len() == tau.k() {
        tau.clone()
    } else {
        tau.keep_columns(&kept)
    };
    Discarded {
        params: survivors,
        posterior,
        kept,
    }
}

/// Starting point with one cluster per curve.
///
/// `beta_k` is the least-squares fit of curve `k`; `sigma2_k` is the median over
/// all curves `i` of `||y_i - X_i beta_k||^2 / m`, which keeps a cluster from
/// starting out degenerate on its own curve. Proportions start uniform and the
/// penalty weight at zero.
pub fn initialize_robust(data: &CurveSet, designs: &CurveDesigns) -> Result<(MixtureParams, f64)> {
    let n = data.n();
    if n < 2 {
        return Err(Error::input("robust EM needs at least two curves"));
    }
    let m = data.m() as f64;
    let beta: Vec<DVector<f64>> = (0..n)
        .map(|k| ordinary_least_squares(designs.get(k), &data.curve_y(k)))
        .collect();
    let sigma2 = beta
        .iter()
        .map(|b| {
            let mut per_obs: Vec<f64> = (0..n)
                .map(|i| (data.curve_y(i) - designs.get(i).apply(b)).norm_squared() / m)
                .collect();
            median(&mut per_obs).max(VARIANCE_FLOOR)
        })
        .collect();
    let params = MixtureParams::new(vec![1.0 / n as f64; n], beta, sigma2)?;
    Ok((params, 0.0))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    }
}

/// Mutable state of a robust fit between iterations.
#[derive(Debug, Clone)]
pub struct RobustState {
    pub iteration: usize,
    pub params: MixtureParams,
    /// The posteriors the latest regression update used: after discarding and
    /// renormalization, one column per surviving cluster.
    pub posterior: PosteriorMatrix,
    pub lambda: f64,
    /// E-step at `params`, reused by the next iteration.
    estep: EStep,
}

impl RobustState {
    /// Observed log-likelihood at the current parameters.
    pub fn loglik(&self) -> f64 {
        self.estep.loglik
    }

    pub fn k(&self) -> usize {
        self.params.k()
    }

    /// Builds a state from arbitrary parameters and penalty weight.
    pub fn from_params(
        params: MixtureParams,
        lambda: f64,
        data: &CurveSet,
        designs: &CurveDesigns,
    ) -> Result<Self> {
        let estep = e_step(&params, data, designs)?;
        Ok(Self {
            iteration: 0,
            posterior: estep.posterior.clone(),
            params,
            lambda,
            estep,
        })
    }

    /// Initialization followed by the first posteriors and the unpenalized
    /// proportions they imply.
    pub fn initial(data: &CurveSet, designs: &CurveDesigns) -> Result<Self> {
        let (mut params, lambda) = initialize_robust(data, designs)?;
        let tau = e_step(&params, data, designs)?.posterior;
        params.pi = robust_proportions_update(&tau, &params.pi, lambda);
        Self::from_params(params, lambda, data, designs)
    }
}

/// Knobs for a single iteration, used to compare against plain EM.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    /// Forces the penalty weight used and produced by the step.
    pub lambda: Option<f64>,
    pub discard: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            lambda: None,
            discard: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// Largest coefficient change among the clusters that survived.
    pub beta_change: f64,
    pub discarded: usize,
    pub warnings: Vec<String>,
}

/// Advances `state` by one iteration.
pub fn robust_step(
    state: &mut RobustState,
    data: &CurveSet,
    designs: &CurveDesigns,
    config: &RobustFitConfig,
    options: StepOptions,
) -> Result<StepReport> {
    let n = data.n();
    let eta = config.eta_override.unwrap_or_else(|| eta_default(data.m()));
    let tau = &state.estep.posterior;
    let pi_old = &state.params.pi;

    let lambda_used = options.lambda.unwrap_or(state.lambda);
    let pi_new = robust_proportions_update(tau, pi_old, lambda_used);
    let lambda_next = match options.lambda {
        Some(forced) => forced,
        None => lambda_update(&pi_new, pi_old, tau, eta, config.lambda_cap),
    };

    let proposal = MixtureParams {
        pi: pi_new,
        beta: state.params.beta.clone(),
        sigma2: state.params.sigma2.clone(),
    };
    let Discarded {
        params: survivors,
        posterior,
        kept,
    } = if options.discard {
        discard_small_clusters(&proposal, tau, n)
    } else {
        Discarded {
            params: proposal,
            posterior: tau.clone(),
            kept: (0..state.params.k()).collect(),
        }
    };
    let discarded = state.params.k() - kept.len();

    let (beta, sigma2, warnings) = regression_m_step(&posterior, &survivors, data, designs)?;
    let beta_change = survivors
        .beta
        .iter()
        .zip(&beta)
        .map(|(old, new)| (old - new).norm())
        .fold(0.0, f64::max);

    let params = MixtureParams {
        pi: survivors.pi,
        beta,
        sigma2,
    };
    let estep = e_step(&params, data, designs)?;
    state.iteration += 1;
    state.params = params;
    state.posterior = posterior;
    state.lambda = lambda_next;
    state.estep = estep;
    Ok(StepReport {
        beta_change,
        discarded,
        warnings,
    })
}

pub fn fit_robust_em(
    data: &CurveSet,
    basis: &BasisSpec,
    config: &RobustFitConfig,
) -> Result<FitResult> {
    fit_robust_em_observed(data, basis, config, |_| {})
}

/// Like [`fit_robust_em`], calling `observer` on the initial state and after
/// every iteration.
pub fn fit_robust_em_observed(
    data: &CurveSet,
    basis: &BasisSpec,
    config: &RobustFitConfig,
    mut observer: impl FnMut(&RobustState),
) -> Result<FitResult> {
    config.validate()?;
    let designs = data.designs(basis)?;
    let n = data.n();
    let mut state = RobustState::initial(data, &designs)?;
    let mut trace = FitTrace::default();
    trace.push(record(&state, n)?);
    observer(&state);

    let mut converged = false;
    while state.iteration < config.max_iter {
        let report = robust_step(&mut state, data, &designs, config, StepOptions::default())?;
        for w in report.warnings {
            trace.warn(format!("iteration {}: {w}", state.iteration));
        }
        trace.push(record(&state, n)?);
        observer(&state);
        if report.beta_change < config.epsilon {
            converged = true;
            break;
        }
    }

    let labels = map_partition(&state.posterior);
    Ok(FitResult {
        engine: Engine::Robust,
        basis: designs.basis().clone(),
        iterations: state.iteration,
        params: state.params,
        posterior: state.posterior,
        labels,
        trace,
        converged,
    })
}

fn record(state: &RobustState, n: usize) -> Result<IterationRecord> {
    Ok(IterationRecord {
        iter: state.iteration,
        k: state.k(),
        lambda: state.lambda,
        loglik: state.loglik(),
        penalized_loglik: penalize(state.loglik(), &state.params.pi, n, state.lambda)?,
        pi: state.params.pi.clone(),
    })
}
