//! Seeded synthetic curve sets.
//!
//! Random numbers come from ChaCha8 seeded with `seed_from_u64`; standard
//! normal variates are drawn with the Ziggurat sampler of `rand_distr`.
//! [`NORMAL_SAMPLER`] names that combination for output metadata.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::model::{CurveSet, MixtureParams};

pub const NORMAL_SAMPLER: &str =
    "ChaCha8Rng::seed_from_u64 + rand_distr::StandardNormal (Ziggurat)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Two noisy lines, 20 curves split 10/10.
    TwoClass,
    /// Three damped sinusoids, 100 curves split 40/30/30.
    ThreeClass,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::TwoClass => "two_class",
            Scenario::ThreeClass => "three_class",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        let n = match scenario {
            Scenario::TwoClass => 20,
            Scenario::ThreeClass => 100,
        };
        Self {
            scenario,
            n,
            m: 50,
            seed,
        }
    }

    pub fn generate(&self) -> Result<CurveSet> {
        if self.n < 1 || self.m < 2 {
            return Err(Error::param("scenario needs n >= 1 and m >= 2"));
        }
        let classes = match self.scenario {
            Scenario::TwoClass => two_class_templates(),
            Scenario::ThreeClass => three_class_templates(),
        };
        generate_stratified(&classes, self.n, self.m, self.seed)
    }
}

/// A class of curves: noiseless template, noise standard deviation, share.
struct ClassTemplate {
    mean: fn(f64) -> f64,
    sd: f64,
    share: f64,
}

fn two_class_templates() -> Vec<ClassTemplate> {
    vec![
        ClassTemplate {
            mean: |x| 0.3 * x + 0.4,
            sd: 0.02,
            share: 0.5,
        },
        ClassTemplate {
            mean: |x| 0.1 * x + 0.5,
            sd: 0.03,
            share: 0.5,
        },
    ]
}

fn three_class_templates() -> Vec<ClassTemplate> {
    vec![
        ClassTemplate {
            mean: three_class_mean_1,
            sd: 0.04,
            share: 0.4,
        },
        ClassTemplate {
            mean: three_class_mean_2,
            sd: 0.04,
            share: 0.3,
        },
        ClassTemplate {
            mean: three_class_mean_3,
            sd: 0.05,
            share: 0.3,
        },
    ]
}

pub fn three_class_mean_1(x: f64) -> f64 {
    0.8 + 0.5 * (-1.5 * x).exp() * (1.3 * std::f64::consts::PI * x).sin()
}

pub fn three_class_mean_2(x: f64) -> f64 {
    0.5 + 0.8 * (-x).exp() * (0.9 * std::f64::consts::PI * x).sin()
}

pub fn three_class_mean_3(x: f64) -> f64 {
    1.0 + 0.5 * (-x).exp() * (1.2 * std::f64::consts::PI * x).sin()
}

/// `m` equally spaced points on `[0, 1]`.
pub fn unit_grid(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.0];
    }
    (0..m).map(|j| j as f64 / (m - 1) as f64).collect()
}

/// Class sizes from shares, largest remainders first so they sum to `n`.
fn stratified_counts(shares: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    let missing = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        counts[c] += 1;
    }
    counts
}

fn generate_stratified(
    classes: &[ClassTemplate],
    n: usize,
    m: usize,
    seed: u64,
) -> Result<CurveSet> {
    let grid = unit_grid(m);
    let shares: Vec<f64> = classes.iter().map(|c| c.share).collect();
    let counts = stratified_counts(&shares, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DMatrix::zeros(n, m);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (c, (class, &count)) in classes.iter().zip(&counts).enumerate() {
        for _ in 0..count {
            for (j, &x) in grid.iter().enumerate() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                y[(row, j)] = (class.mean)(x) + class.sd * eps;
            }
            labels.push(c + 1);
            row += 1;
        }
    }
    CurveSet::with_shared_grid(&grid, y, Some(labels))
}

/// Two-class linear scenario: 20 curves of 50 points on `[0, 1]`,
/// labels 1 and 2.
pub fn generate_two_class(seed: u64) -> CurveSet {
    ScenarioSpec::new(Scenario::TwoClass, seed)
        .generate()
        .expect("fixed scenario parameters are valid")
}

/// Three-class non-linear scenario: 100 curves of 50 points on `[0, 1]`,
/// labels 1 to 3.
pub fn generate_three_class(seed: u64) -> CurveSet {
    ScenarioSpec::new(Scenario::ThreeClass, seed)
        .generate()
        .expect("fixed scenario parameters are valid")
}

/// Draws `n` curves from a regression mixture on `grid`.
///
/// Labels are `z_i ~ Categorical(pi)` reported one-based; responses are
/// `X beta_z + sigma_z eps`.
pub fn sample_from_mixture(
    params: &MixtureParams,
    basis: &BasisSpec,
    n: usize,
    grid: &[f64],
    seed: u64,
) -> Result<CurveSet> {
    params.validate()?;
    if n < 1 {
        return Err(Error::param("need at least one curve"));
    }
    let design = basis.design(grid)?;
    if design.ncols() != params.dim() {
        return Err(Error::param(format!(
            "basis has {} columns but coefficients have length {}",
            design.ncols(),
            params.dim()
        )));
    }
    let means: Vec<_> = params.beta.iter().map(|b| design.apply(b)).collect();
    let picker = WeightedIndex::new(&params.pi)
        .map_err(|e| Error::param(format!("invalid proportions: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = grid.len();
    let mut y = DMatrix::zeros(n, m);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let z = picker.sample(&mut rng);
        let sd = params.sigma2[z].sqrt();
        for j in 0..m {
            let eps: f64 = rng.sample(StandardNormal);
            y[(i, j)] = means[z][j] + sd * eps;
        }
        labels.push(z + 1);
    }
    CurveSet::with_shared_grid(grid, y, Some(labels))
}
