//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written the slow, obvious way and shares no code with
//! the library beyond its data types.
#![allow(dead_code)]

use curvemix::basis::BasisSpec;
use curvemix::model::{CurveSet, MixtureParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Cox-de Boor recursion for `B_{i,p}` on `knots`.
///
/// On the last knot the final non-empty span is treated as closed so the basis
/// still sums to one at the right end.
pub fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        let (a, b) = (knots[i], knots[i + 1]);
        let last = *knots.last().unwrap();
        if a < b && (a <= x && x < b || x == last && b == last) {
            return 1.0;
        }
        return 0.0;
    }
    let mut value = 0.0;
    let left = knots[i + p] - knots[i];
    if left > 0.0 {
        value += (x - knots[i]) / left * cox_de_boor(knots, i, p - 1, x);
    }
    let right = knots[i + p + 1] - knots[i + 1];
    if right > 0.0 {
        value += (knots[i + p + 1] - x) / right * cox_de_boor(knots, i + 1, p - 1, x);
    }
    value
}

/// Row of clamped B-spline values at `x`.
pub fn bspline_row(x: f64, p: usize, interior: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut knots = vec![lo; p + 1];
    knots.extend_from_slice(interior);
    knots.extend(std::iter::repeat_n(hi, p + 1));
    let count = knots.len() - p - 1;
    (0..count).map(|i| cox_de_boor(&knots, i, p, x)).collect()
}

pub fn vandermonde(x: &[f64], p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), p + 1, |r, c| {
        let mut v = 1.0;
        for _ in 0..c {
            v *= x[r];
        }
        v
    })
}

/// Log-density of `N(mean, cov)` through a dense Cholesky factor.
pub fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let m = y.len() as f64;
    let chol = cov
        .clone()
        .cholesky()
        .expect("covariance must be positive definite");
    let l = chol.l();
    let log_det: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    let r = y - mean;
    let z = chol.solve(&r);
    -0.5 * (m * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&z))
}

pub fn isotropic_logpdf(y: &DVector<f64>, mean: &DVector<f64>, sigma2: f64) -> f64 {
    let cov = DMatrix::identity(y.len(), y.len()) * sigma2;
    mvn_logpdf(y, mean, &cov)
}

/// Polynomial-basis component density of curve `i` without logs.
fn density(data: &CurveSet, p: usize, params: &MixtureParams, i: usize, k: usize) -> f64 {
    let x = vandermonde(&data.curve_x(i), p);
    let mean = &x * &params.beta[k];
    isotropic_logpdf(&data.curve_y(i), &mean, params.sigma2[k]).exp()
}

/// `tau_ik = pi_k f_k / sum_h pi_h f_h` computed with plain densities.
pub fn naive_posterior(data: &CurveSet, p: usize, params: &MixtureParams) -> DMatrix<f64> {
    let k = params.k();
    DMatrix::from_fn(data.n(), k, |i, c| {
        let num = params.pi[c] * density(data, p, params, i, c);
        let den: f64 = (0..k)
            .map(|h| params.pi[h] * density(data, p, params, i, h))
            .sum();
        num / den
    })
}

pub fn direct_loglik(data: &CurveSet, p: usize, params: &MixtureParams) -> f64 {
    (0..data.n())
        .map(|i| {
            (0..params.k())
                .map(|h| params.pi[h] * density(data, p, params, i, h))
                .sum::<f64>()
                .ln()
        })
        .sum()
}

/// Minimizer of `sum_i w_i ||y_i - X_i beta||^2` from the stacked system
/// `[sqrt(w_i) X_i] beta = [sqrt(w_i) y_i]`, solved by SVD.
pub fn stacked_wls(weights: &[f64], xs: &[DMatrix<f64>], ys: &[DVector<f64>]) -> DVector<f64> {
    let rows: usize = xs.iter().map(|x| x.nrows()).sum();
    let d = xs[0].ncols();
    let mut a = DMatrix::zeros(rows, d);
    let mut b = DVector::zeros(rows);
    let mut r0 = 0;
    for ((x, y), &w) in xs.iter().zip(ys).zip(weights) {
        let s = w.sqrt();
        for r in 0..x.nrows() {
            for c in 0..d {
                a[(r0 + r, c)] = s * x[(r, c)];
            }
            b[r0 + r] = s * y[r];
        }
        r0 += x.nrows();
    }
    a.svd(true, true).solve(&b, 1e-14).unwrap()
}

/// `sum_i w_i ||y_i - X_i beta||^2 / (m sum_i w_i)`.
pub fn weighted_variance(
    weights: &[f64],
    xs: &[DMatrix<f64>],
    ys: &[DVector<f64>],
    beta: &DVector<f64>,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((x, y), &w) in xs.iter().zip(ys).zip(weights) {
        for r in 0..x.nrows() {
            let fit: f64 = (0..x.ncols()).map(|c| x[(r, c)] * beta[c]).sum();
            num += w * (y[r] - fit) * (y[r] - fit);
        }
        den += w * x.nrows() as f64;
    }
    num / den
}

/// Adjusted Rand index by counting agreeing and disagreeing pairs.
pub fn pair_counting_ari(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    2.0 * (both * neither - only_a * only_b)
        / ((both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither))
}

/// Penalized proportions, one term at a time, then clamped and renormalized.
pub fn robust_pi_termwise(tau: &DMatrix<f64>, pi_old: &[f64], lambda: f64) -> Vec<f64> {
    let n = tau.nrows() as f64;
    let mut s = 0.0;
    for &p in pi_old {
        s += p * p.ln();
    }
    let mut out = Vec::new();
    for k in 0..pi_old.len() {
        let mut mean = 0.0;
        for i in 0..tau.nrows() {
            mean += tau[(i, k)];
        }
        mean /= n;
        let v = mean + lambda * pi_old[k] * (pi_old[k].ln() - s);
        out.push(if v < 0.0 { 0.0 } else { v });
    }
    let total: f64 = out.iter().sum();
    out.iter().map(|v| v / total).collect()
}

pub fn lambda_oracle(
    pi_new: &[f64],
    pi_old: &[f64],
    tau: &DMatrix<f64>,
    eta: f64,
    cap: f64,
) -> f64 {
    let n = tau.nrows() as f64;
    let k = pi_new.len();
    let mut a = 0.0;
    for c in 0..k {
        a += (eta * n * (pi_new[c] - pi_old[c]).abs()).exp();
    }
    a /= k as f64;
    let mut best = 0.0f64;
    for c in 0..k {
        let mean: f64 = (0..tau.nrows()).map(|i| tau[(i, c)]).sum::<f64>() / n;
        best = best.max(mean);
    }
    let entropy: f64 = -pi_old.iter().map(|&p| p * p.ln()).sum::<f64>();
    let b = if entropy > 0.0 {
        (1.0 - best) / entropy
    } else {
        f64::INFINITY
    };
    a.min(b).min(cap)
}

/// Keeps columns with `pi_k >= 1/n`, renormalizing `pi` and each `tau` row.
pub fn discard_oracle(
    pi: &[f64],
    tau: &DMatrix<f64>,
    n: usize,
) -> (Vec<usize>, Vec<f64>, DMatrix<f64>) {
    let kept: Vec<usize> = (0..pi.len()).filter(|&k| pi[k] >= 1.0 / n as f64).collect();
    let total: f64 = kept.iter().map(|&k| pi[k]).sum();
    let new_pi = kept.iter().map(|&k| pi[k] / total).collect();
    let mut new_tau = DMatrix::zeros(tau.nrows(), kept.len());
    for i in 0..tau.nrows() {
        let row: f64 = kept.iter().map(|&k| tau[(i, k)]).sum();
        for (c, &k) in kept.iter().enumerate() {
            new_tau[(i, c)] = tau[(i, k)] / row;
        }
    }
    (kept, new_pi, new_tau)
}

/// A random point on the simplex with every entry at least `floor`.
pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| floor + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

pub fn random_tau(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    let mut tau = DMatrix::zeros(n, k);
    for i in 0..n {
        let row = random_simplex(rng, k, 0.01);
        for c in 0..k {
            tau[(i, c)] = row[c];
        }
    }
    tau
}

/// Random curves scattered around `k` random polynomials of degree `p`.
///
/// With `shared` false every curve gets its own sorted grid in `[0, 1]`.
pub struct Instance {
    pub data: CurveSet,
    pub basis: BasisSpec,
    pub params: MixtureParams,
    pub p: usize,
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    k: usize,
    p: usize,
    shared: bool,
) -> Instance {
    let grid = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut g: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        g.sort_by(f64::total_cmp);
        g
    };
    let common = grid(rng);
    let beta: Vec<DVector<f64>> = (0..k)
        .map(|_| DVector::from_fn(p + 1, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let sigma2: Vec<f64> = (0..k).map(|_| rng.random_range(0.005..0.05)).collect();
    let pi = random_simplex(rng, k, 0.2);
    let mut x = DMatrix::zeros(n, m);
    let mut y = DMatrix::zeros(n, m);
    let mut labels = Vec::new();
    for i in 0..n {
        let g = if shared { common.clone() } else { grid(rng) };
        let c = i % k;
        labels.push(c);
        let mean = vandermonde(&g, p) * &beta[c];
        for j in 0..m {
            x[(i, j)] = g[j];
            let noise: f64 = rng.sample(rand_distr::StandardNormal);
            y[(i, j)] = mean[j] + sigma2[c].sqrt() * noise;
        }
    }
    let data = CurveSet::new(x, y, Some(labels)).unwrap();
    let params = MixtureParams::new(pi, beta, sigma2).unwrap();
    Instance {
        data,
        basis: BasisSpec::polynomial(p),
        params,
        p,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
