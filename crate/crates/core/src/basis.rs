//! Regression bases for curves.
//!
//! Two families are supported: the raw monomial (Vandermonde) basis and the
//! clamped B-spline basis. Inputs are used as given. The monomial basis is
//! not orthogonalized, so inputs spread over a wide range (say, raw
//! timestamps) should be rescaled to roughly `[0, 1]` before fitting high
//! degrees.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Polynomial,
    Bspline,
}

/// Declarative description of a regression basis.
///
/// For B-splines the boundary of the knot vector defaults to the range of
/// the input grid the design is built from. When a basis is shared by many
/// curves it should be pinned with [`BasisSpec::with_boundary`] so that every
/// curve sees the same knot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub degree: usize,
    #[serde(default)]
    pub interior_knots: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<(f64, f64)>,
}

impl BasisSpec {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            kind: BasisKind::Polynomial,
            degree,
            interior_knots: Vec::new(),
            boundary: None,
        }
    }

    pub fn bspline(degree: usize, interior_knots: Vec<f64>) -> Self {
        Self {
            kind: BasisKind::Bspline,
            degree,
            interior_knots,
            boundary: None,
        }
    }

    /// B-spline basis with `count` equally spaced interior knots on `(lo, hi)`.
    pub fn bspline_uniform(degree: usize, count: usize, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::input(format!("invalid knot range [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (count + 1) as f64;
        let knots = (1..=count).map(|j| lo + j as f64 * step).collect();
        Ok(Self {
            kind: BasisKind::Bspline,
            degree,
            interior_knots: knots,
            boundary: Some((lo, hi)),
        })
    }

    pub fn with_boundary(mut self, lo: f64, hi: f64) -> Self {
        self.boundary = Some((lo, hi));
        self
    }

    /// Number of regression coefficients `d`.
    pub fn n_coefficients(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial => self.degree + 1,
            BasisKind::Bspline => self.degree + 1 + self.interior_knots.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BasisKind::Polynomial => {
                if !self.interior_knots.is_empty() {
                    return Err(Error::param("polynomial basis takes no knots"));
                }
            }
            BasisKind::Bspline => {
                if self.interior_knots.iter().any(|k| !k.is_finite()) {
                    return Err(Error::input("non-finite knot"));
                }
                if self.interior_knots.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::input("interior knots must be strictly increasing"));
                }
                if let Some((lo, hi)) = self.boundary {
                    check_knots_inside(&self.interior_knots, lo, hi)?;
                }
            }
        }
        Ok(())
    }

    /// Builds the design matrix of this basis on the grid `x`.
    pub fn design(&self, x: &[f64]) -> Result<DesignMatrix> {
        self.validate()?;
        match self.kind {
            BasisKind::Polynomial => polynomial_design(x, self.degree),
            BasisKind::Bspline => {
                let (lo, hi) = match self.boundary {
                    Some(b) => b,
                    None => finite_range(x)?,
                };
                let values = bspline_values(x, self.degree, &self.interior_knots, lo, hi)?;
                Ok(DesignMatrix {
                    values,
                    spec: self.clone().with_boundary(lo, hi),
                })
            }
        }
    }
}

/// An `m x d` regression matrix together with the basis that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    spec: BasisSpec,
}

impl DesignMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Evaluates the fitted curve `X * beta`.
    pub fn apply(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.values * beta
    }
}

/// Vandermonde matrix with rows `(1, x, x^2, ..., x^p)`.
pub fn polynomial_design(x: &[f64], degree: usize) -> Result<DesignMatrix> {
    check_grid(x)?;
    let values = DMatrix::from_fn(x.len(), degree + 1, |j, r| x[j].powi(r as i32));
    Ok(DesignMatrix {
        values,
        spec: BasisSpec::polynomial(degree),
    })
}

/// Clamped B-spline design matrix.
///
/// The knot vector repeats `min(x)` and `max(x)` `degree + 1` times around the
/// interior knots, which must lie strictly inside that range.
pub fn bspline_design(x: &[f64], degree: usize, interior_knots: &[f64]) -> Result<DesignMatrix> {
    BasisSpec::bspline(degree, interior_knots.to_vec()).design(x)
}

/// Full clamped knot vector for the given boundary and interior knots.
pub fn clamped_knot_vector(degree: usize, interior_knots: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut t = Vec::with_capacity(2 * (degree + 1) + interior_knots.len());
    t.extend(std::iter::repeat_n(lo, degree + 1));
    t.extend_from_slice(interior_knots);
    t.extend(std::iter::repeat_n(hi, degree + 1));
    t
}

fn bspline_values(
    x: &[f64],
    degree: usize,
    interior_knots: &[f64],
    lo: f64,
    hi: f64,
) -> Result<DMatrix<f64>> {
    check_grid(x)?;
    if lo >= hi {
        return Err(Error::input(
            "B-spline basis needs an input range of positive width",
        ));
    }
    check_knots_inside(interior_knots, lo, hi)?;
    let t = clamped_knot_vector(degree, interior_knots, lo, hi);
    let n_basis = degree + 1 + interior_knots.len();

    let mut out = DMatrix::zeros(x.len(), n_basis);
    let mut local = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    for (j, &xj) in x.iter().enumerate() {
        if xj < lo || xj > hi {
            return Err(Error::input(format!(
                "input {xj} outside the knot range [{lo}, {hi}]"
            )));
        }
        let span = find_span(&t, n_basis, degree, xj);
        // de Boor's triangular scheme for the degree + 1 nonzero functions.
        local[0] = 1.0;
        for level in 1..=degree {
            left[level] = xj - t[span + 1 - level];
            right[level] = t[span + level] - xj;
            let mut saved = 0.0;
            for r in 0..level {
                let temp = local[r] / (right[r + 1] + left[level - r]);
                local[r] = saved + right[r + 1] * temp;
                saved = left[level - r] * temp;
            }
            local[level] = saved;
        }
        for (r, &v) in local.iter().enumerate() {
            out[(j, span - degree + r)] = v;
        }
    }
    Ok(out)
}

/// Index `s` with `t[s] <= x < t[s+1]`; the right boundary belongs to the last span.
fn find_span(t: &[f64], n_basis: usize, degree: usize, x: f64) -> usize {
    if x >= t[n_basis] {
        return n_basis - 1;
    }
    // t[degree..=n_basis] is non-decreasing; pick the last knot <= x.
    let upper = t[degree..=n_basis].partition_point(|&k| k <= x);
    degree + upper - 1
}

fn check_grid(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::input("empty input grid"));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("non-finite input value {bad}")));
    }
    Ok(())
}

fn check_knots_inside(knots: &[f64], lo: f64, hi: f64) -> Result<()> {
    if let Some(k) = knots.iter().find(|&&k| !(k > lo && k < hi)) {
        return Err(Error::input(format!(
            "knot {k} is not strictly inside the input range ({lo}, {hi})"
        )));
    }
    if knots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::input("interior knots must be strictly increasing"));
    }
    Ok(())
}

fn finite_range(x: &[f64]) -> Result<(f64, f64)> {
    check_grid(x)?;
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}
