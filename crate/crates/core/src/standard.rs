//! Standard EM for a regression mixture with a fixed number of clusters.
//!
//! This is the baseline the robust engine is compared against. It also owns
//! the weighted least-squares M-step that both engines share.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::linalg::solve_normal_equations;
use crate::model::{
    e_step, map_partition, CurveDesigns, CurveSet, EStep, Engine, FitResult, FitTrace,
    IterationRecord, MixtureParams, PosteriorMatrix, VARIANCE_FLOOR,
};

/// Clusters whose total posterior weight falls below this keep their
/// previous regression parameters for the iteration.
pub const COLLAPSE_WEIGHT: f64 = 1e-10;

/// New coefficients, variances and warnings from one regression update.
pub(crate) type RegressionUpdate = (Vec<DVector<f64>>, Vec<f64>, Vec<String>);

#[derive(Debug, Clone, PartialEq)]
pub struct StandardFitConfig {
    pub k: usize,
    /// Stop when `max_k ||beta_k(new) - beta_k(old)||` drops below this.
    pub epsilon: f64,
    pub max_iter: usize,
    pub n_restarts: usize,
    pub seed: u64,
}

impl StandardFitConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            epsilon: 1e-6,
            max_iter: 1000,
            n_restarts: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::param("K must be at least 1"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::param("epsilon must be positive"));
        }
        if self.max_iter < 1 {
            return Err(Error::param("max_iter must be at least 1"));
        }
        if self.n_restarts < 1 {
            return Err(Error::param("n_restarts must be at least 1"));
        }
        Ok(())
    }
}

/// How the baseline picks its starting point.
#[derive(Debug, Clone)]
pub enum StandardInit {
    /// Random balanced hard partition into K groups followed by one M-step,
    /// drawn independently for each restart.
    Random,
    /// Hard partition given as zero-based cluster indices, then one M-step.
    Partition(Vec<usize>),
    Params(MixtureParams),
}

/// `pi_k = (1/n) sum_i tau_ik`.
pub fn m_step_proportions(tau: &PosteriorMatrix) -> Vec<f64> {
    let n = tau.n() as f64;
    tau.column_sums().into_iter().map(|s| s / n).collect()
}

/// Weighted least squares `[sum_i w_i X_i'X_i]^-1 sum_i w_i X_i'y_i`.
pub fn wls_beta_update(
    weights: &[f64],
    data: &CurveSet,
    designs: &CurveDesigns,
) -> Result<DVector<f64>> {
    check_weights(weights, data)?;
    let d = designs.n_coefficients();
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    if designs.is_shared() {
        // sum_i w_i X'X = (sum w) X'X and sum_i w_i X'y_i = X' (sum_i w_i y_i).
        let x = designs.get(0).values();
        let total: f64 = weights.iter().sum();
        let pooled = data.y().tr_mul(&DVector::from_column_slice(weights));
        gram = x.tr_mul(x) * total;
        rhs = x.tr_mul(&pooled);
    } else {
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let x = designs.get(i).values();
            gram += x.tr_mul(x) * w;
            rhs += x.tr_mul(&data.curve_y(i)) * w;
        }
    }
    Ok(solve_normal_equations(&gram, &rhs))
}

/// Per-observation noise variance `sum_i w_i ||y_i - X_i beta||^2 / (m sum_i w_i)`,
/// floored at [`VARIANCE_FLOOR`].
pub fn variance_update(
    weights: &[f64],
    data: &CurveSet,
    designs: &CurveDesigns,
    beta: &DVector<f64>,
) -> Result<f64> {
    check_weights(weights, data)?;
    let mut weighted_rss = 0.0;
    let mut total = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        total += w;
        if w == 0.0 {
            continue;
        }
        weighted_rss += w * (data.curve_y(i) - designs.get(i).apply(beta)).norm_squared();
    }
    Ok((weighted_rss / (data.m() as f64 * total)).max(VARIANCE_FLOOR))
}

fn check_weights(weights: &[f64], data: &CurveSet) -> Result<()> {
    if weights.len() != data.n() {
        return Err(Error::input(format!(
            "{} weights for {} curves",
            weights.len(),
            data.n()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::input("weights must be finite and non-negative"));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::input("weights sum to zero"));
    }
    Ok(())
}

/// Updates `beta_k` then `sigma2_k` for every cluster from the posteriors.
///
/// `previous` supplies the parameters kept for clusters that have collapsed;
/// the returned messages name those clusters.
pub(crate) fn regression_m_step(
    tau: &PosteriorMatrix,
    previous: &MixtureParams,
    data: &CurveSet,
    designs: &CurveDesigns,
) -> Result<RegressionUpdate> {
    let mut beta = Vec::with_capacity(tau.k());
    let mut sigma2 = Vec::with_capacity(tau.k());
    let mut warnings = Vec::new();
    for k in 0..tau.k() {
        let weights = tau.column(k);
        let total: f64 = weights.iter().sum();
        if total < COLLAPSE_WEIGHT {
            warnings.push(format!(
                "cluster {} collapsed (total weight {total:e}); parameters left unchanged",
                k + 1
            ));
            beta.push(previous.beta[k].clone());
            sigma2.push(previous.sigma2[k]);
            continue;
        }
        let b = wls_beta_update(&weights, data, designs)?;
        sigma2.push(variance_update(&weights, data, designs, &b)?);
        beta.push(b);
    }
    Ok((beta, sigma2, warnings))
}

/// One full EM iteration from `params`: E-step, then the M-step.
#[derive(Debug, Clone)]
pub struct StandardStep {
    /// Posteriors at the incoming parameters.
    pub estep: EStep,
    pub params: MixtureParams,
    pub warnings: Vec<String>,
}

pub fn standard_em_step(
    params: &MixtureParams,
    data: &CurveSet,
    designs: &CurveDesigns,
) -> Result<StandardStep> {
    let estep = e_step(params, data, designs)?;
    let step = m_step_from(&estep.posterior, params, data, designs)?;
    Ok(StandardStep {
        estep,
        params: step.0,
        warnings: step.1,
    })
}

fn m_step_from(
    tau: &PosteriorMatrix,
    previous: &MixtureParams,
    data: &CurveSet,
    designs: &CurveDesigns,
) -> Result<(MixtureParams, Vec<String>)> {
    let pi = m_step_proportions(tau);
    let (beta, sigma2, warnings) = regression_m_step(tau, previous, data, designs)?;
    Ok((MixtureParams { pi, beta, sigma2 }, warnings))
}

/// Parameters from a hard partition: one M-step on indicator posteriors.
pub fn params_from_partition(
    labels: &[usize],
    k: usize,
    data: &CurveSet,
    designs: &CurveDesigns,
) -> Result<MixtureParams> {
    if labels.len() != data.n() {
        return Err(Error::input(format!(
            "{} labels for {} curves",
            labels.len(),
            data.n()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!(
            "label {bad} out of range for K = {k}"
        )));
    }
    let tau = PosteriorMatrix::from_probabilities(DMatrix::from_fn(data.n(), k, |i, c| {
        if labels[i] == c {
            1.0
        } else {
            0.0
        }
    }))?;
    let pi = m_step_proportions(&tau);
    let mut beta = Vec::with_capacity(k);
    let mut sigma2 = Vec::with_capacity(k);
    for c in 0..k {
        let weights = tau.column(c);
        if weights.iter().sum::<f64>() == 0.0 {
            return Err(Error::input(format!(
                "initial partition leaves cluster {} empty",
                c + 1
            )));
        }
        let b = wls_beta_update(&weights, data, designs)?;
        sigma2.push(variance_update(&weights, data, designs, &b)?);
        beta.push(b);
    }
    MixtureParams::new(pi, beta, sigma2)
}

fn random_partition(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut labels = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        labels[i] = slot % k;
    }
    labels
}

/// Runs standard EM, keeping the restart with the highest final log-likelihood.
pub fn fit_standard_em(
    data: &CurveSet,
    basis: &BasisSpec,
    config: &StandardFitConfig,
    init: StandardInit,
) -> Result<FitResult> {
    config.validate()?;
    if config.k > data.n() {
        return Err(Error::param(format!(
            "K = {} exceeds the number of curves {}",
            config.k,
            data.n()
        )));
    }
    let designs = data.designs(basis)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let restarts = match init {
        StandardInit::Random => config.n_restarts,
        _ => 1,
    };
    let mut best: Option<FitResult> = None;
    for _ in 0..restarts {
        let start = match &init {
            StandardInit::Random => {
                let labels = random_partition(data.n(), config.k, &mut rng);
                params_from_partition(&labels, config.k, data, &designs)?
            }
            StandardInit::Partition(labels) => {
                params_from_partition(labels, config.k, data, &designs)?
            }
            StandardInit::Params(p) => {
                p.validate()?;
                if p.k() != config.k {
                    return Err(Error::param(format!(
                        "initial parameters have {} clusters, config asks for {}",
                        p.k(),
                        config.k
                    )));
                }
                p.clone()
            }
        };
        let fit = run_from(start, data, &designs, config)?;
        let better = best.as_ref().is_none_or(|b| {
            fit.trace.records.last().unwrap().loglik > b.trace.records.last().unwrap().loglik
        });
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn run_from(
    start: MixtureParams,
    data: &CurveSet,
    designs: &CurveDesigns,
    config: &StandardFitConfig,
) -> Result<FitResult> {
    let mut trace = FitTrace::default();
    let mut params = start;
    let mut estep = e_step(&params, data, designs)?;
    trace.push(record(0, &params, estep.loglik));

    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let (next, warnings) = m_step_from(&estep.posterior, &params, data, designs)?;
        iterations += 1;
        for w in warnings {
            trace.warn(format!("iteration {iterations}: {w}"));
        }
        let change = params
            .beta
            .iter()
            .zip(&next.beta)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        params = next;
        estep = e_step(&params, data, designs)?;
        trace.push(record(iterations, &params, estep.loglik));
        if change < config.epsilon {
            converged = true;
            break;
        }
    }

    let labels = map_partition(&estep.posterior);
    Ok(FitResult {
        engine: Engine::Standard,
        basis: designs.basis().clone(),
        params,
        posterior: estep.posterior,
        labels,
        trace,
        converged,
        iterations,
    })
}

fn record(iter: usize, params: &MixtureParams, loglik: f64) -> IterationRecord {
    IterationRecord {
        iter,
        k: params.k(),
        lambda: 0.0,
        loglik,
        penalized_loglik: loglik,
        pi: params.pi.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(m: usize) -> Vec<f64> {
        (0..m).map(|j| j as f64 / (m - 1) as f64).collect()
    }

    fn set(rows: &[Vec<f64>]) -> CurveSet {
        let m = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        CurveSet::with_shared_grid(
            &grid(m),
            DMatrix::from_row_slice(rows.len(), m, &flat),
            None,
        )
        .unwrap()
    }

    #[test]
    fn proportions_from_hard_assignments() {
        let tau = PosteriorMatrix::from_probabilities(DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        ))
        .unwrap();
        assert_eq!(m_step_proportions(&tau), vec![0.75, 0.25]);

        let uniform =
            PosteriorMatrix::from_probabilities(DMatrix::from_element(5, 4, 0.25)).unwrap();
        assert_eq!(m_step_proportions(&uniform), vec![0.25; 4]);
    }

    #[test]
    fn single_curve_square_system_interpolates() {
        let data = set(&[vec![0.3, -0.2, 1.1]]);
        let designs = data.designs(&BasisSpec::polynomial(2)).unwrap();
        let beta = wls_beta_update(&[1.0], &data, &designs).unwrap();
        assert_abs_diff_eq!(
            designs.get(0).apply(&beta),
            data.curve_y(0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn identical_curves_give_the_single_curve_fit() {
        let curve = vec![0.1, 0.5, 0.4, 0.9, 0.7];
        let one = set(std::slice::from_ref(&curve));
        let many = set(&[curve.clone(), curve.clone(), curve]);
        let basis = BasisSpec::polynomial(1);
        let a = wls_beta_update(&[1.0], &one, &one.designs(&basis).unwrap()).unwrap();
        let b = wls_beta_update(&[0.3, 0.3, 0.3], &many, &many.designs(&basis).unwrap()).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn variance_examples() {
        let data = set(&[vec![0.2, 0.4, 0.6]]);
        let designs = data.designs(&BasisSpec::polynomial(1)).unwrap();
        let beta = DVector::from_vec(vec![0.2, 0.4]);
        assert_eq!(
            variance_update(&[1.0], &data, &designs, &beta).unwrap(),
            VARIANCE_FLOOR
        );

        let data = set(&[vec![1.0; 50]]);
        let designs = data.designs(&BasisSpec::polynomial(0)).unwrap();
        let beta = DVector::from_vec(vec![0.0]);
        assert_abs_diff_eq!(
            variance_update(&[1.0], &data, &designs, &beta).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_weights_are_rejected() {
        let data = set(&[vec![0.2, 0.4, 0.6]]);
        let designs = data.designs(&BasisSpec::polynomial(1)).unwrap();
        assert!(wls_beta_update(&[0.0], &data, &designs).is_err());
        assert!(wls_beta_update(&[1.0, 1.0], &data, &designs).is_err());
    }

    #[test]
    fn symmetric_state_stays_symmetric() {
        let data = set(&[
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.5, 0.1, 0.3, 0.0],
            vec![1.0, 0.8, 0.9, 1.2],
        ]);
        let designs = data.designs(&BasisSpec::polynomial(1)).unwrap();
        let b = DVector::from_vec(vec![0.3, 0.1]);
        let params =
            MixtureParams::new(vec![0.5, 0.5], vec![b.clone(), b], vec![0.2, 0.2]).unwrap();
        let step = standard_em_step(&params, &data, &designs).unwrap();
        assert_eq!(step.params.beta[0], step.params.beta[1]);
        assert_eq!(step.params.sigma2[0], step.params.sigma2[1]);
        assert_eq!(step.params.pi[0], step.params.pi[1]);
    }

    #[test]
    fn collapsed_cluster_keeps_parameters() {
        let data = set(&[vec![0.0, 0.1, 0.0, 0.1], vec![0.1, 0.0, 0.1, 0.0]]);
        let far = DVector::from_vec(vec![1e3]);
        let params = MixtureParams::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![0.05]), far.clone()],
            vec![0.01, 0.01],
        )
        .unwrap();
        let config = StandardFitConfig {
            max_iter: 3,
            ..StandardFitConfig::new(2)
        };
        let fit = fit_standard_em(
            &data,
            &BasisSpec::polynomial(0),
            &config,
            StandardInit::Params(params),
        )
        .unwrap();
        assert_eq!(fit.params.beta[1], far);
        assert!(!fit.trace.warnings.is_empty());
    }

    #[test]
    fn config_validation() {
        let data = set(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let basis = BasisSpec::polynomial(0);
        for bad in [
            StandardFitConfig::new(0),
            StandardFitConfig {
                epsilon: 0.0,
                ..StandardFitConfig::new(1)
            },
            StandardFitConfig {
                max_iter: 0,
                ..StandardFitConfig::new(1)
            },
            StandardFitConfig::new(3),
        ] {
            assert!(fit_standard_em(&data, &basis, &bad, StandardInit::Random).is_err());
        }
    }

    #[test]
    fn random_partition_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels = random_partition(10, 3, &mut rng);
        let counts: Vec<usize> = (0..3)
            .map(|c| labels.iter().filter(|&&l| l == c).count())
            .collect();
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert!(counts.iter().all(|&c| c >= 3));
    }
}
