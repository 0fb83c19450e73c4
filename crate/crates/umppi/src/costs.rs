//! Stage costs: quadratic and risk-sensitive state terms, crash indicator,
//! and the quadratic control-effort term.
//!
//! The risk-sensitive state cost for a Gaussian state estimate `(x, Sigma)`
//! with diagonal weight `Q` and risk parameter `gamma` is
//!
//! ```text
//! q_rs = (1/gamma) ln det(I + gamma Q Sigma) + ||x - x_f||^2_{Q_rs}
//! Q_rs = (Q^-1 + gamma Sigma)^-1
//! ```
//!
//! For `|gamma|` under [`GAMMA_SWITCH`] the closed form degenerates to its
//! limit `tr(Q Sigma) + ||x - x_f||^2_Q`, which keeps the map continuous in
//! `gamma`. `gamma > 0` is risk-averse (uncertainty raises cost), `gamma < 0`
//! risk-seeking, `gamma -> 0` neutral.

use std::fmt;

use nalgebra::{Cholesky, Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{angle_diff, ControlInput, RobotState};
use crate::unscented::psd_sqrt;
use crate::world::CollisionQuery;
use crate::{real, Real};

/// Below this |gamma| the risk-sensitive cost uses its gamma->0 limit.
pub const GAMMA_SWITCH: f64 = 1e-8;

/// Eigenvalue floor applied when `Q^-1 + gamma Sigma` loses definiteness
/// (possible for gamma < 0).
pub const EIGENVALUE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum CostError {
    BadParams(String),
    /// Monte-Carlo weights are not representable; gamma, Q and Sigma scales
    /// are incompatible.
    DegenerateWeights,
}

impl fmt::Display for CostError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostError::BadParams(msg) => write!(f, "invalid cost parameters: {msg}"),
            CostError::DegenerateWeights => {
                write!(f, "Monte-Carlo weights degenerate; gamma/Q/Sigma scales are incompatible")
            }
        }
    }
}

impl std::error::Error for CostError {}

/// Weights and knobs shared by every cost term.
#[derive(Clone, Debug)]
pub struct CostParams<T> {
    /// Diagonal of the state weight matrix `Q`.
    pub q_diag: Vector3<T>,
    /// Risk sensitivity; positive is risk-averse.
    pub gamma: T,
    /// Penalty added when a state touches an obstacle.
    pub w_crash: T,
    /// Control-effort weight matrix `R`.
    pub r: Matrix2<T>,
    /// Exploration variance scaling; enters the noise cost via
    /// `gamma_u = (nu - 1) / (2 nu)`.
    pub nu: T,
    /// Softmax temperature of the rollout-weighting step.
    pub lambda: T,
    /// Pose the state cost is measured against.
    pub goal: RobotState<T>,
}

impl<T: Real> CostParams<T> {
    pub fn validate(&self) -> Result<(), CostError> {
        for (i, q) in self.q_diag.iter().enumerate() {
            if !(*q > T::zero()) {
                return Err(CostError::BadParams(format!("q_diag[{i}] = {q} must be positive")));
            }
        }
        if !(self.w_crash >= T::zero()) {
            return Err(CostError::BadParams(format!("w_crash {} negative", self.w_crash)));
        }
        if !(self.nu >= T::one()) {
            return Err(CostError::BadParams(format!("nu {} must be at least 1", self.nu)));
        }
        if !(self.lambda > T::zero()) {
            return Err(CostError::BadParams(format!("lambda {} must be positive", self.lambda)));
        }
        if !self.gamma.is_finite() {
            return Err(CostError::BadParams("gamma must be finite".into()));
        }
        if self.r.cholesky().is_none() {
            return Err(CostError::BadParams("R must be positive-definite".into()));
        }
        Ok(())
    }

    /// `(nu - 1) / (2 nu)`, the weight on the pure-noise quadratic.
    pub fn gamma_u(&self) -> T {
        (self.nu - T::one()) / (real::<T>(2.0) * self.nu)
    }
}

/// Goal-relative error with the heading component wrapped into `(-pi, pi]`.
pub fn goal_error<T: Real>(x: &RobotState<T>, goal: &RobotState<T>) -> Vector3<T> {
    Vector3::new(x.x - goal.x, x.y - goal.y, angle_diff(x.theta, goal.theta))
}

/// Plain quadratic state cost `||x - goal||^2_Q`.
pub fn quadratic_state_cost<T: Real>(x: &RobotState<T>, p: &CostParams<T>) -> T {
    let e = goal_error(x, &p.goal);
    p.q_diag[0] * e[0] * e[0] + p.q_diag[1] * e[1] * e[1] + p.q_diag[2] * e[2] * e[2]
}

/// Risk-sensitive stage cost for one covariance, reusable across all sigma
/// points sharing that covariance. Precomputes the effective weight matrix
/// and the log-det term once.
#[derive(Clone, Debug)]
pub struct RsStepCost<T, const N: usize> {
    q_rs: SMatrix<T, N, N>,
    log_det_term: T,
    /// How many eigenvalues hit [`EIGENVALUE_FLOOR`]; nonzero means gamma is
    /// negative enough to defeat the closed form and results are clamped.
    pub clamped: usize,
}

impl<T: Real, const N: usize> RsStepCost<T, N> {
    pub fn new(q_diag: &SVector<T, N>, gamma: T, sigma: &SMatrix<T, N, N>) -> Self {
        if gamma.abs() < real(GAMMA_SWITCH) {
            // gamma -> 0 limit: tr(Q Sigma) plus the plain quadratic.
            let mut trace = T::zero();
            for i in 0..N {
                trace += q_diag[i] * sigma[(i, i)];
            }
            return Self {
                q_rs: SMatrix::from_diagonal(q_diag),
                log_det_term: trace,
                clamped: 0,
            };
        }

        // det(I + gamma Q Sigma) = det(Q) det(S) with S = Q^-1 + gamma Sigma,
        // and S is symmetric, so factor S instead of the asymmetric product.
        let mut s = (sigma + sigma.transpose()) * (real::<T>(0.5) * gamma);
        let mut log_det_q = T::zero();
        for i in 0..N {
            s[(i, i)] += q_diag[i].recip();
            log_det_q += q_diag[i].ln();
        }

        let (q_rs, log_det_s, clamped) = match s.cholesky() {
            Some(chol) => {
                let mut ld = T::zero();
                for i in 0..N {
                    ld += chol.l()[(i, i)].ln();
                }
                (chol.inverse(), ld + ld, 0)
            }
            None => {
                // Indefinite S: clamp its spectrum and reuse the clamped
                // eigenvalues for both the inverse and the log-det so the
                // two terms stay consistent. Routed through dynamic storage
                // to avoid dimension-arithmetic bounds on the public API;
                // this path is cold (needs strongly negative gamma).
                let dyn_s = nalgebra::DMatrix::from_fn(N, N, |i, j| s[(i, j)]);
                let eig = dyn_s.symmetric_eigen();
                let floor = real::<T>(EIGENVALUE_FLOOR);
                let mut clamped = 0;
                let mut ld = T::zero();
                let mut inv_vals = vec![T::zero(); N];
                for i in 0..N {
                    let v = if eig.eigenvalues[i] < floor {
                        clamped += 1;
                        floor
                    } else {
                        eig.eigenvalues[i]
                    };
                    ld += v.ln();
                    inv_vals[i] = v.recip();
                }
                let vecs = &eig.eigenvectors;
                let inv = SMatrix::<T, N, N>::from_fn(|i, j| {
                    let mut acc = T::zero();
                    for k in 0..N {
                        acc += vecs[(i, k)] * inv_vals[k] * vecs[(j, k)];
                    }
                    acc
                });
                (inv, ld, clamped)
            }
        };

        let q_rs = (q_rs + q_rs.transpose()) * real::<T>(0.5);
        Self { q_rs, log_det_term: (log_det_q + log_det_s) / gamma, clamped }
    }

    /// Effective state weight `Q_rs`.
    pub fn weight_matrix(&self) -> &SMatrix<T, N, N> {
        &self.q_rs
    }

    pub fn log_det_term(&self) -> T {
        self.log_det_term
    }

    /// Full stage value for one goal-relative error vector.
    pub fn eval(&self, err: &SVector<T, N>) -> T {
        self.log_det_term + err.dot(&(self.q_rs * err))
    }
}

/// Effective weight matrix `Q_rs = (Q^-1 + gamma Sigma)^-1` (or its clamped
/// surrogate).
pub fn rs_weight_matrix<T: Real, const N: usize>(
    q_diag: &SVector<T, N>,
    gamma: T,
    sigma: &SMatrix<T, N, N>,
) -> SMatrix<T, N, N> {
    RsStepCost::new(q_diag, gamma, sigma).q_rs
}

/// One-off evaluation of the risk-sensitive cost for an error vector.
pub fn risk_sensitive_cost<T: Real, const N: usize>(
    err: &SVector<T, N>,
    sigma: &SMatrix<T, N, N>,
    q_diag: &SVector<T, N>,
    gamma: T,
) -> T {
    RsStepCost::new(q_diag, gamma, sigma).eval(err)
}

/// Robot-state wrapper around [`risk_sensitive_cost`] using the params'
/// goal and heading wrapping.
pub fn risk_sensitive_state_cost<T: Real>(
    x: &RobotState<T>,
    sigma: &Matrix3<T>,
    p: &CostParams<T>,
) -> T {
    risk_sensitive_cost(&goal_error(x, &p.goal), sigma, &p.q_diag, p.gamma)
}

/// Monte-Carlo estimate of the exponential-utility state cost
/// `-(2/gamma) ln E[exp(-(gamma/2) ||e||^2_Q)]` with `e ~ N(err_mean, sigma)`.
///
/// Serves as the independent reference for the closed form above. Draws are
/// antithetic (`+z`/`-z` pairs), which is unbiased and cancels odd-order
/// noise. For strongly risk-seeking `gamma` the naive estimator loses its
/// second moment (rare huge weights dominate), so when `I + 2 gamma LᵀQL`
/// loses positive definiteness by margin `0.5 I` (`L` the covariance factor)
/// the sampler switches to a doubled-covariance proposal with the exact
/// density ratio folded into each weight — still unbiased for the same
/// expectation, but with finite variance at the heavy-tail corner. The
/// reduction is log-sum-exp so extreme weights neither underflow nor
/// overflow. A fixed seed gives a bit-identical estimate.
pub fn mc_rs_oracle<T: Real, const N: usize>(
    err_mean: &SVector<T, N>,
    sigma: &SMatrix<T, N, N>,
    q_diag: &SVector<T, N>,
    gamma: T,
    n_samples: usize,
    seed: u64,
) -> Result<T, CostError> {
    if n_samples == 0 {
        return Err(CostError::BadParams("n_samples must be positive".into()));
    }
    let spread = psd_sqrt(sigma)
        .map_err(|e| CostError::BadParams(format!("sigma not usable: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quad = |e: &SVector<T, N>| {
        let mut q = T::zero();
        for i in 0..N {
            q += q_diag[i] * e[i] * e[i];
        }
        q
    };

    if gamma.abs() < real(GAMMA_SWITCH) {
        // Risk-neutral limit: plain expectation of the quadratic under the
        // target distribution itself.
        let mut pending: Option<SVector<T, N>> = None;
        let mut acc = T::zero();
        for _ in 0..n_samples {
            let e = pending.take().unwrap_or_else(|| {
                let mut z = SVector::<T, N>::zeros();
                for zi in z.iter_mut() {
                    *zi = T::standard_normal(&mut rng);
                }
                let offset = spread * z;
                pending = Some(err_mean - offset);
                err_mean + offset
            });
            acc += quad(&e);
        }
        return Ok(acc / real::<T>(n_samples as f64));
    }

    let half = real::<T>(0.5);
    let half_gamma = gamma * half;

    // Naive sampling keeps a finite second moment iff I + 2 gamma LᵀQL is
    // positive definite; demand margin 0.5 I before trusting it. Only a
    // risk-seeking gamma can violate this.
    let wide_proposal = gamma < T::zero() && {
        let mut a = SMatrix::<T, N, N>::identity() * half;
        let two_gamma = gamma + gamma;
        for i in 0..N {
            for j in 0..N {
                let mut s = T::zero();
                for k in 0..N {
                    s += spread[(k, i)] * q_diag[k] * spread[(k, j)];
                }
                a[(i, j)] += two_gamma * s;
            }
        }
        Cholesky::new(a).is_none()
    };
    // Each draw yields the log-weight of one sample:
    //   e = mean + sqrt(c) L z,  s = -(gamma/2) q(e) - (c-1)|z|^2/2 + (N/2) ln c
    // where the trailing terms are the exact N(0, Sigma) / N(0, c Sigma)
    // density ratio in z coordinates (valid for any L, singular included);
    // they vanish for the plain proposal c = 1.
    let (scale, ratio_coeff, ratio_const) = if wide_proposal {
        (
            real::<T>(2.0).sqrt(),
            -half,
            real::<T>(0.5 * (N as f64) * std::f64::consts::LN_2),
        )
    } else {
        (T::one(), T::zero(), T::zero())
    };
    let mut pending: Option<T> = None;
    let mut draw_log_weight = |rng: &mut ChaCha8Rng| -> T {
        if let Some(s) = pending.take() {
            return s;
        }
        let mut z = SVector::<T, N>::zeros();
        for zi in z.iter_mut() {
            *zi = T::standard_normal(rng);
        }
        let offset = spread * z * scale;
        let ratio = ratio_coeff * z.norm_squared() + ratio_const;
        pending = Some(-half_gamma * quad(&(err_mean - offset)) + ratio);
        -half_gamma * quad(&(err_mean + offset)) + ratio
    };

    let mut exponents = Vec::with_capacity(n_samples);
    let mut max_s: Option<T> = None;
    for _ in 0..n_samples {
        let s = draw_log_weight(&mut rng);
        if !s.is_finite() {
            return Err(CostError::DegenerateWeights);
        }
        if max_s.map_or(true, |m| s > m) {
            max_s = Some(s);
        }
        exponents.push(s);
    }
    let max_s = max_s.expect("n_samples > 0");
    let mut sum = T::zero();
    for s in &exponents {
        sum += (*s - max_s).exp();
    }
    let log_mean = max_s + sum.ln() - real::<T>(n_samples as f64).ln();
    let value = -(real::<T>(2.0) / gamma) * log_mean;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CostError::DegenerateWeights)
    }
}

/// `w_crash` if the position collides, else zero.
pub fn crash_cost<T: Real, C: CollisionQuery<T> + ?Sized>(
    x: &RobotState<T>,
    world: &C,
    w_crash: T,
) -> T {
    if world.is_collision_point(x.x, x.y) {
        w_crash
    } else {
        T::zero()
    }
}

/// Quadratic control-effort term
/// `gamma_u du' R du + u' R du + 0.5 u' R u`.
pub fn control_cost<T: Real>(u: &ControlInput<T>, du: &ControlInput<T>, p: &CostParams<T>) -> T {
    let uv = Vector2::new(u.v, u.omega);
    let dv = Vector2::new(du.v, du.omega);
    let r_du = p.r * dv;
    let r_u = p.r * uv;
    p.gamma_u() * dv.dot(&r_du) + uv.dot(&r_du) + real::<T>(0.5) * uv.dot(&r_u)
}
