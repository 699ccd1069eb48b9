//! Multivariate normal primitives.
//!
//! Everything goes through the lower Cholesky factor `L` of the covariance
//! (`Σ = L Lᵀ`): the log-determinant is `2 Σ ln L_ii` and Mahalanobis terms
//! are triangular solves. No explicit inverse or determinant is formed.
//!
//! Fitting is plain maximum likelihood per class. The training sets are fully
//! labelled, so expectation-maximisation over a single component has no
//! latent assignment to estimate and collapses to the sample mean and the
//! (denominator `n`) sample covariance.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Continuous grasp pose features.
pub type FeatureVector = DVector<f64>;

/// Relative tolerance for the covariance symmetry check.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("covariance must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("covariance is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("no samples to fit")]
    NoSamples,
    #[error("{got} samples cannot fit a {dim}-dimensional gaussian without regularization (need {})", dim + 1)]
    TooFewSamples { got: usize, dim: usize },
    #[error("negative regularization {0}")]
    NegativeRegularization(f64),
    #[error("covariance is degenerate even after regularization")]
    Degenerate,
}

/// Mean, covariance and the cached Cholesky factor of one normal component.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    mean: FeatureVector,
    covariance: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianParams {
    pub fn new(mean: FeatureVector, covariance: DMatrix<f64>) -> Result<Self, GaussianError> {
        let d = mean.len();
        if covariance.nrows() != covariance.ncols() {
            return Err(GaussianError::NotSquare {
                rows: covariance.nrows(),
                cols: covariance.ncols(),
            });
        }
        if covariance.nrows() != d {
            return Err(GaussianError::DimensionMismatch {
                expected: d,
                actual: covariance.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite("mean"));
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite("covariance"));
        }
        let scale = covariance.amax();
        let mut asym: f64 = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                asym = asym.max((covariance[(i, j)] - covariance[(j, i)]).abs());
            }
        }
        if scale > 0.0 && asym > SYMMETRY_TOLERANCE * scale {
            return Err(GaussianError::NotSymmetric(asym / scale));
        }
        let factor = Cholesky::new(covariance.clone()).ok_or(GaussianError::NotPositiveDefinite)?;
        let log_det = 2.0 * factor.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(GaussianError::NotPositiveDefinite);
        }
        Ok(Self {
            mean,
            covariance,
            factor,
            log_det,
        })
    }

    /// Independent features with the given variances.
    pub fn diagonal(mean: FeatureVector, variances: &[f64]) -> Result<Self, GaussianError> {
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &FeatureVector {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower-triangular Cholesky factor `L` with `Σ = L Lᵀ`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    fn check(&self, x: &FeatureVector) -> Result<(), GaussianError> {
        if x.len() != self.dim() {
            return Err(GaussianError::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite("feature vector"));
        }
        Ok(())
    }

    /// `Σ⁻¹ v` through the factor.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    /// `(x−μ)ᵀ Σ⁻¹ (x−μ)`.
    pub fn mahalanobis_sq(&self, x: &FeatureVector) -> Result<f64, GaussianError> {
        self.check(x)?;
        let z = self.whiten(&(x - &self.mean));
        Ok(z.norm_squared())
    }

    /// `L⁻¹ v`.
    fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn log_pdf(&self, x: &FeatureVector) -> Result<f64, GaussianError> {
        let maha = self.mahalanobis_sq(x)?;
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det + maha))
    }

    pub fn pdf(&self, x: &FeatureVector) -> Result<f64, GaussianError> {
        Ok(self.log_pdf(x)?.exp())
    }

    /// `∇ₓ ln N(x; μ, Σ) = −Σ⁻¹ (x − μ)`.
    pub fn log_pdf_grad(&self, x: &FeatureVector) -> Result<FeatureVector, GaussianError> {
        self.check(x)?;
        Ok(-self.solve(&(x - &self.mean)))
    }

    /// `∇ₓ N(x; μ, Σ) = −N(x; μ, Σ) Σ⁻¹ (x − μ)`.
    pub fn pdf_grad(&self, x: &FeatureVector) -> Result<FeatureVector, GaussianError> {
        let p = self.pdf(x)?;
        Ok(self.log_pdf_grad(x)? * p)
    }

    /// Draws `μ + L z` with `z` standard normal from the caller's generator.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<FeatureVector> {
        let l = self.factor.l();
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
                &self.mean + &l * z
            })
            .collect()
    }

    /// Deterministic draws keyed by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<FeatureVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, n)
    }
}

impl PartialEq for GaussianParams {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance
    }
}

/// How much `εI` to add to a fitted covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Regularization {
    /// `ε = scale · trace(Σ) / d`. Conditions the estimate but does not lift
    /// the `d + 1` sample requirement.
    Relative(f64),
    /// A fixed `ε`. Any positive value allows fitting from fewer than `d + 1`
    /// samples.
    Fixed(f64),
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Relative(1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianFitOptions {
    pub regularization: Regularization,
    pub covariance: CovarianceKind,
}

/// Sample mean and covariance (denominator `n`) plus `regularization · I`.
pub fn fit_mle(samples: &[FeatureVector], regularization: f64) -> Result<GaussianParams, GaussianError> {
    fit_with(
        samples,
        &GaussianFitOptions {
            regularization: Regularization::Fixed(regularization),
            covariance: CovarianceKind::Full,
        },
    )
}

pub fn fit_with(samples: &[FeatureVector], options: &GaussianFitOptions) -> Result<GaussianParams, GaussianError> {
    let first = samples.first().ok_or(GaussianError::NoSamples)?;
    let d = first.len();
    for s in samples {
        if s.len() != d {
            return Err(GaussianError::DimensionMismatch {
                expected: d,
                actual: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite("sample"));
        }
    }
    let n = samples.len();
    let lifts_count = match options.regularization {
        Regularization::Fixed(eps) | Regularization::Relative(eps) if eps < 0.0 || !eps.is_finite() => {
            return Err(GaussianError::NegativeRegularization(eps))
        }
        Regularization::Fixed(eps) => eps > 0.0,
        Regularization::Relative(_) => false,
    };
    if n < d + 1 && !lifts_count {
        return Err(GaussianError::TooFewSamples { got: n, dim: d });
    }

    let inv_n = 1.0 / n as f64;
    let mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) * inv_n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let diff = s - &mean;
        cov.ger(inv_n, &diff, &diff, 1.0);
    }
    // ger accumulates exactly symmetric terms, but enforce it bitwise.
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    if options.covariance == CovarianceKind::Diagonal {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    let eps = match options.regularization {
        Regularization::Fixed(eps) => eps,
        Regularization::Relative(scale) => scale * cov.trace() / d as f64,
    };
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    GaussianParams::new(mean, cov).map_err(|e| match e {
        GaussianError::NotPositiveDefinite => GaussianError::Degenerate,
        other => other,
    })
}

/// `(2π)^(−d/2)`, exposed for callers that assemble densities by hand.
pub fn normalising_constant(d: usize) -> f64 {
    (2.0 * PI).powf(-(d as f64) / 2.0)
}
