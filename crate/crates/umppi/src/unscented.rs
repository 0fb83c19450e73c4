//! Scaled unscented transform: sigma-point generation, propagation through
//! the dynamics, and moment reconstruction.
//!
//! For an `N`-dimensional state the transform uses `2N + 1` points: the mean
//! plus symmetric pairs along the columns of the scaled covariance factor
//! `sqrt((N + lambda) * Sigma)`. Spread and weighting are controlled by
//! `alpha`, `k_sigma` and `beta` through `lambda = alpha^2 (N + k_sigma) - N`.

use std::fmt;

use nalgebra::{SMatrix, SVector};

use crate::dynamics::{step, ControlInput, RobotState};
use crate::{real, Real};

#[derive(Clone, Debug, PartialEq)]
pub enum UtError {
    BadParams(String),
    /// Covariance stayed indefinite after the full jitter ladder.
    NotPositiveSemiDefinite,
}

impl fmt::Display for UtError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtError::BadParams(msg) => write!(f, "invalid sigma-point parameters: {msg}"),
            UtError::NotPositiveSemiDefinite => {
                write!(f, "covariance is not positive semi-definite (jitter up to 1e-6 exhausted)")
            }
        }
    }
}

impl std::error::Error for UtError {}

/// Spread parameters of the scaled transform.
#[derive(Clone, Copy, Debug)]
pub struct UtParams<T> {
    pub alpha: T,
    pub k_sigma: T,
    pub beta: T,
    pub n_x: usize,
}

impl<T: Real> UtParams<T> {
    pub fn new(alpha: T, k_sigma: T, beta: T, n_x: usize) -> Result<Self, UtError> {
        let p = Self { alpha, k_sigma, beta, n_x };
        p.validate()?;
        Ok(p)
    }

    /// Default tuning used throughout the benchmark configs.
    pub fn defaults(n_x: usize) -> Self {
        Self { alpha: T::one(), k_sigma: real(0.5), beta: real(2.0), n_x }
    }

    /// `lambda = alpha^2 (n_x + k_sigma) - n_x`.
    pub fn lambda_sigma(&self) -> T {
        let n = real::<T>(self.n_x as f64);
        self.alpha * self.alpha * (n + self.k_sigma) - n
    }

    /// `n_x + lambda`, the squared spread of the point set.
    pub fn scale(&self) -> T {
        real::<T>(self.n_x as f64) + self.lambda_sigma()
    }

    pub fn n_sigma(&self) -> usize {
        2 * self.n_x + 1
    }

    pub fn validate(&self) -> Result<(), UtError> {
        if self.n_x == 0 {
            return Err(UtError::BadParams("n_x must be at least 1".into()));
        }
        if !(self.alpha > T::zero() && self.alpha <= T::one()) {
            return Err(UtError::BadParams(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.k_sigma >= T::zero()) {
            return Err(UtError::BadParams(format!("k_sigma {} negative", self.k_sigma)));
        }
        if !self.beta.is_finite() {
            return Err(UtError::BadParams("beta must be finite".into()));
        }
        if !(self.scale() > T::zero()) {
            return Err(UtError::BadParams(format!(
                "n_x + lambda = {} must be positive",
                self.scale()
            )));
        }
        Ok(())
    }
}

/// Mean and covariance weights for one point set. Mean weights sum to one;
/// the center covariance weight may be negative.
#[derive(Clone, Debug)]
pub struct UtWeights<T> {
    pub mean: Vec<T>,
    pub cov: Vec<T>,
}

pub fn ut_weights<T: Real>(p: &UtParams<T>) -> Result<UtWeights<T>, UtError> {
    p.validate()?;
    let scale = p.scale();
    let lambda = p.lambda_sigma();
    let n_sigma = p.n_sigma();
    let w0_mean = lambda / scale;
    let w0_cov = w0_mean + (T::one() - p.alpha * p.alpha + p.beta);
    let wi = (real::<T>(2.0) * scale).recip();
    let mut mean = vec![wi; n_sigma];
    let mut cov = vec![wi; n_sigma];
    mean[0] = w0_mean;
    cov[0] = w0_cov;
    Ok(UtWeights { mean, cov })
}

/// Lower-triangular factor `L` with `L L^T = cov`, after symmetrizing.
///
/// Exactly-zero input short-circuits to the zero factor so a collapsed
/// covariance stays collapsed bit-for-bit. Semi-definite inputs go through a
/// jitter ladder `1e-12 * I .. 1e-6 * I` (tenfold steps); if none of the
/// levels factors, the covariance is treated as indefinite.
pub fn psd_sqrt<T: Real, const N: usize>(
    cov: &SMatrix<T, N, N>,
) -> Result<SMatrix<T, N, N>, UtError> {
    if cov.iter().all(|&c| c == T::zero()) {
        return Ok(SMatrix::zeros());
    }
    let sym = (cov + cov.transpose()) * real::<T>(0.5);
    if let Some(chol) = sym.cholesky() {
        return Ok(chol.l());
    }
    let mut eps = 1e-12f64;
    while eps <= 1.0000001e-6 {
        let jittered = sym + SMatrix::<T, N, N>::identity() * real::<T>(eps);
        if let Some(chol) = jittered.cholesky() {
            return Ok(chol.l());
        }
        eps *= 10.0;
    }
    Err(UtError::NotPositiveSemiDefinite)
}

/// Sigma points for one Gaussian: the mean followed by plus/minus pairs.
#[derive(Clone, Debug)]
pub struct SigmaSet<T, const N: usize> {
    pub points: Vec<SVector<T, N>>,
}

impl<T: Real, const N: usize> SigmaSet<T, N> {
    pub fn n_sigma(&self) -> usize {
        self.points.len()
    }

    /// Applies an arbitrary state map to every point.
    pub fn map(&mut self, f: impl Fn(&SVector<T, N>) -> SVector<T, N>) {
        for p in &mut self.points {
            *p = f(p);
        }
    }
}

pub fn sigma_points<T: Real, const N: usize>(
    mean: &SVector<T, N>,
    cov: &SMatrix<T, N, N>,
    p: &UtParams<T>,
) -> Result<SigmaSet<T, N>, UtError> {
    let mut points = vec![SVector::zeros(); 2 * N + 1];
    sigma_points_into(mean, cov, p, &mut points)?;
    Ok(SigmaSet { points })
}

/// Allocation-free variant; `out` must hold `2N + 1` slots.
pub fn sigma_points_into<T: Real, const N: usize>(
    mean: &SVector<T, N>,
    cov: &SMatrix<T, N, N>,
    p: &UtParams<T>,
    out: &mut [SVector<T, N>],
) -> Result<(), UtError> {
    if p.n_x != N {
        return Err(UtError::BadParams(format!("n_x {} does not match state dim {N}", p.n_x)));
    }
    assert_eq!(out.len(), 2 * N + 1, "sigma buffer size");
    let spread = psd_sqrt(cov)? * p.scale().sqrt();
    out[0] = *mean;
    for i in 0..N {
        let col = spread.column(i);
        out[1 + i] = mean + col;
        out[1 + N + i] = mean - col;
    }
    Ok(())
}

/// Advances every point one step under one shared control.
pub fn propagate_sigma<T: Real>(set: &mut SigmaSet<T, 3>, u: &ControlInput<T>, dt: T) {
    propagate_points(&mut set.points, u, dt);
}

/// Slice version of [`propagate_sigma`] for reusable buffers.
pub fn propagate_points<T: Real>(points: &mut [SVector<T, 3>], u: &ControlInput<T>, dt: T) {
    for p in points {
        let next = step(&RobotState::from_vector(p), u, dt);
        *p = next.to_vector();
    }
}

/// Weighted mean and covariance of a point set, covariance symmetrized.
pub fn reconstruct_moments<T: Real, const N: usize>(
    points: &[SVector<T, N>],
    w: &UtWeights<T>,
) -> (SVector<T, N>, SMatrix<T, N, N>) {
    debug_assert_eq!(points.len(), w.mean.len());
    // A fully collapsed set must reconstruct to exactly (point, 0), not to
    // within rounding of it, so that a zero covariance stays zero through
    // arbitrarily many propagation steps.
    if points.iter().all(|p| p == &points[0]) {
        return (points[0], SMatrix::zeros());
    }
    let mut mean = SVector::<T, N>::zeros();
    for (p, &wm) in points.iter().zip(&w.mean) {
        mean += p * wm;
    }
    let mut cov = SMatrix::<T, N, N>::zeros();
    for (p, &wc) in points.iter().zip(&w.cov) {
        let d = p - mean;
        cov += d * d.transpose() * wc;
    }
    cov = (cov + cov.transpose()) * real::<T>(0.5);
    (mean, cov)
}
