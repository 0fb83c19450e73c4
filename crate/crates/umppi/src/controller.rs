//! Sampling-based receding-horizon optimizer.
//!
//! Each control step draws Gaussian perturbations around the nominal control
//! sequence, simulates one batch of trajectories per perturbation column in
//! parallel, scores them, exponentially weights the perturbations by score,
//! smooths the updated sequence, and warm-starts the next step by shifting
//! the sequence left. Three sampling modes are supported: plain single-state
//! rollouts, and two unscented modes that carry a state covariance along each
//! rollout and score against an uncertainty-adjusted cost.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::costs::{
    control_cost, crash_cost, goal_error, quadratic_state_cost, CostParams, RsStepCost,
};
use crate::dynamics::{clamp_control, step, ControlBounds, ControlInput, RobotState};
use crate::unscented::{
    propagate_points, reconstruct_moments, sigma_points_into, ut_weights, UtParams, UtWeights,
};
use crate::world::CollisionQuery;
use crate::{real, Real};

/// How rollout trajectories are generated and scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    /// One mean trajectory per perturbation column, quadratic state cost.
    Mppi,
    /// Sigma-point propagation for the covariance; only the central
    /// trajectory of each batch is scored, so every perturbation column
    /// still forms its own batch.
    UmppiSm0,
    /// Sigma-point propagation where every sigma trajectory is scored and
    /// weighted as an independent sample carrying its batch's perturbation
    /// column.
    UmppiSm1,
}

impl SamplingMode {
    /// Stable identifier used in CSV output and CLI flags.
    pub fn label(&self) -> &'static str {
        match self {
            SamplingMode::Mppi => "mppi",
            SamplingMode::UmppiSm0 => "umppi-sm0",
            SamplingMode::UmppiSm1 => "umppi-sm1",
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerError {
    BadConfig(String),
    /// Every rollout was rejected (non-finite cost); no update is possible.
    NoFeasibleRollout,
}

impl fmt::Display for ControllerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControllerError::BadConfig(msg) => write!(f, "bad controller config: {msg}"),
            ControllerError::NoFeasibleRollout => write!(f, "no feasible rollout"),
        }
    }
}

impl std::error::Error for ControllerError {}

/// Everything a [`Controller`] needs: problem size, sampling mode, noise
/// scale, initial state covariance, cost and transform parameters, actuator
/// bounds, smoother shape, and the RNG seed.
#[derive(Clone, Debug)]
pub struct ControllerConfig<T> {
    /// Prediction horizon in steps.
    pub horizon: usize,
    /// Total trajectory budget per optimization pass.
    pub rollouts: usize,
    pub mode: SamplingMode,
    /// Diagonal of the control-noise covariance (v, omega).
    pub sigma_u: Vector2<T>,
    /// State covariance at the start of every rollout.
    pub sigma_0: Matrix3<T>,
    /// Simulation step size [s].
    pub dt: T,
    pub ut: UtParams<T>,
    pub costs: CostParams<T>,
    pub bounds: ControlBounds<T>,
    /// Smoother window length (odd).
    pub sg_window: usize,
    /// Smoother polynomial order (below the window length).
    pub sg_order: usize,
    pub seed: u64,
}

impl<T: Real> ControllerConfig<T> {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |msg: String| Err(ControllerError::BadConfig(msg));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.rollouts == 0 {
            return bad("rollouts must be at least 1".into());
        }
        for (name, s) in [("sigma_u v", self.sigma_u.x), ("sigma_u omega", self.sigma_u.y)] {
            if !(s.is_finite() && s >= T::zero()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.dt.is_finite() && self.dt > T::zero()) {
            return bad("dt must be positive".into());
        }
        if !self.sigma_0.iter().all(|v| v.is_finite()) {
            return bad("sigma_0 must be finite".into());
        }
        self.ut
            .validate()
            .map_err(|e| ControllerError::BadConfig(format!("ut: {e}")))?;
        self.costs
            .validate()
            .map_err(|e| ControllerError::BadConfig(format!("costs: {e}")))?;
        self.bounds
            .validate()
            .map_err(ControllerError::BadConfig)?;
        if self.sg_window == 0 || self.sg_window % 2 == 0 {
            return bad("sg_window must be odd".into());
        }
        if self.sg_order >= self.sg_window {
            return bad("sg_order must be below sg_window".into());
        }
        if self.mode == SamplingMode::UmppiSm1 && self.rollouts < self.ut.n_sigma() {
            return bad(format!(
                "rollouts ({}) must cover at least one full batch of {} sigma trajectories",
                self.rollouts,
                self.ut.n_sigma()
            ));
        }
        Ok(())
    }

    /// Number of perturbation columns (= parallel rollout batches).
    ///
    /// In the all-points sampling mode the trajectory budget is split into
    /// full batches of `n_sigma` trajectories; otherwise each trajectory is
    /// its own batch.
    pub fn batches(&self) -> usize {
        match self.mode {
            SamplingMode::Mppi | SamplingMode::UmppiSm0 => self.rollouts,
            SamplingMode::UmppiSm1 => self.rollouts / self.ut.n_sigma(),
        }
    }

    /// Cost entries scored per batch.
    pub fn entries_per_batch(&self) -> usize {
        match self.mode {
            SamplingMode::Mppi | SamplingMode::UmppiSm0 => 1,
            SamplingMode::UmppiSm1 => self.ut.n_sigma(),
        }
    }
}

/// Control perturbations for one optimization pass, one column per batch.
///
/// Storage is batch-major: a batch's horizon-length column is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTensor<T> {
    horizon: usize,
    batches: usize,
    data: Vec<ControlInput<T>>,
}

impl<T: Real> NoiseTensor<T> {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn column(&self, m: usize) -> &[ControlInput<T>] {
        &self.data[m * self.horizon..(m + 1) * self.horizon]
    }

    pub fn get(&self, k: usize, m: usize) -> &ControlInput<T> {
        &self.data[m * self.horizon + k]
    }
}

/// Draws the zero-mean Gaussian perturbation tensor for one optimization
/// pass. Each batch has its own counter-derived RNG stream, so the result is
/// bit-identical for a given `(seed, iteration)` regardless of how the work
/// is scheduled.
pub fn sample_noise<T: Real>(cfg: &ControllerConfig<T>, iteration: u64) -> NoiseTensor<T> {
    let horizon = cfg.horizon;
    let batches = cfg.batches();
    let sd_v = cfg.sigma_u.x.sqrt();
    let sd_w = cfg.sigma_u.y.sqrt();
    let mut data = Vec::with_capacity(horizon * batches);
    for m in 0..batches {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iteration.wrapping_mul(batches as u64).wrapping_add(m as u64));
        for _ in 0..horizon {
            let v = sd_v * T::standard_normal(&mut rng);
            let w = sd_w * T::standard_normal(&mut rng);
            data.push(ControlInput::new(v, w));
        }
    }
    NoiseTensor { horizon, batches, data }
}

/// Cost-to-go of every scored trajectory, flattened batch-major, plus the
/// minimum over the finite entries.
#[derive(Clone, Debug)]
pub struct RolloutCosts<T> {
    values: Vec<T>,
    entries_per_batch: usize,
    s_min: Option<T>,
}

impl<T: Real> RolloutCosts<T> {
    pub fn new(values: Vec<T>, entries_per_batch: usize) -> Self {
        assert!(entries_per_batch > 0, "entries_per_batch must be positive");
        assert_eq!(values.len() % entries_per_batch, 0, "ragged cost table");
        let mut s_min: Option<T> = None;
        for &v in &values {
            if v.is_finite() && s_min.map_or(true, |m| v < m) {
                s_min = Some(v);
            }
        }
        RolloutCosts { values, entries_per_batch, s_min }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn entries_per_batch(&self) -> usize {
        self.entries_per_batch
    }

    pub fn batches(&self) -> usize {
        self.values.len() / self.entries_per_batch
    }

    pub fn batch(&self, m: usize) -> &[T] {
        &self.values[m * self.entries_per_batch..(m + 1) * self.entries_per_batch]
    }

    /// Minimum finite cost, or `None` when every rollout was rejected.
    pub fn s_min(&self) -> Option<T> {
        self.s_min
    }
}

/// Recorded evolution of a single batch: per-step moments and the points the
/// running cost was scored at (one point per step in plain mode). Step-major;
/// `points` holds `points_per_step` entries for each of horizon + 1 steps.
#[derive(Clone, Debug)]
pub struct SigmaBatch<T> {
    pub means: Vec<RobotState<T>>,
    pub covs: Vec<Matrix3<T>>,
    pub points: Vec<RobotState<T>>,
    pub points_per_step: usize,
}

trait RolloutSink<T: Real> {
    fn record(&mut self, mean: &Vector3<T>, cov: &Matrix3<T>, points: &[Vector3<T>]);
}

/// Zero-cost sink for the optimization hot path.
struct NoRecord;

impl<T: Real> RolloutSink<T> for NoRecord {
    #[inline]
    fn record(&mut self, _: &Vector3<T>, _: &Matrix3<T>, _: &[Vector3<T>]) {}
}

impl<T: Real> RolloutSink<T> for SigmaBatch<T> {
    fn record(&mut self, mean: &Vector3<T>, cov: &Matrix3<T>, points: &[Vector3<T>]) {
        self.means.push(RobotState::from_vector(mean));
        self.covs.push(*cov);
        self.points_per_step = points.len();
        self.points.extend(points.iter().map(RobotState::from_vector));
    }
}

fn rollout_mppi<T, C, S>(
    start: &RobotState<T>,
    cfg: &ControllerConfig<T>,
    world: &C,
    u: &[ControlInput<T>],
    noise: &[ControlInput<T>],
    sink: &mut S,
) -> T
where
    T: Real,
    C: CollisionQuery<T> + ?Sized,
    S: RolloutSink<T>,
{
    let p = &cfg.costs;
    let mut x = *start;
    let mut total = T::zero();
    sink.record(&x.to_vector(), &Matrix3::zeros(), &[x.to_vector()]);
    for (uk, du) in u.iter().zip(noise) {
        total += quadratic_state_cost(&x, p)
            + crash_cost(&x, world, p.w_crash)
            + control_cost(uk, du, p);
        let w = clamp_control(ControlInput::new(uk.v + du.v, uk.omega + du.omega), &cfg.bounds);
        x = step(&x, &w, cfg.dt);
        sink.record(&x.to_vector(), &Matrix3::zeros(), &[x.to_vector()]);
    }
    total += quadratic_state_cost(&x, p) + crash_cost(&x, world, p.w_crash);
    if total.is_finite() {
        total
    } else {
        real::<T>(f64::INFINITY)
    }
}

fn rollout_unscented<T, C, S>(
    start: &RobotState<T>,
    cfg: &ControllerConfig<T>,
    world: &C,
    u: &[ControlInput<T>],
    noise: &[ControlInput<T>],
    weights: &UtWeights<T>,
    score_all: bool,
    sink: &mut S,
) -> Vec<T>
where
    T: Real,
    C: CollisionQuery<T> + ?Sized,
    S: RolloutSink<T>,
{
    let p = &cfg.costs;
    let n_sigma = cfg.ut.n_sigma();
    let entries = if score_all { n_sigma } else { 1 };
    let mut costs = vec![T::zero(); entries];
    let mut mean = start.to_vector();
    let mut cov = cfg.sigma_0;
    let mut pts: Vec<Vector3<T>> = vec![Vector3::zeros(); n_sigma];

    for (uk, du) in u.iter().zip(noise) {
        // Moments to sigma points: redraw the point set around the running
        // (mean, covariance) pair, score it there, then push the points
        // through the dynamics and collapse them back into moments.
        if sigma_points_into(&mean, &cov, &cfg.ut, &mut pts).is_err() {
            return vec![real::<T>(f64::INFINITY); entries];
        }
        sink.record(&mean, &cov, &pts);
        let rs = RsStepCost::new(&p.q_diag, p.gamma, &cov);
        let cc = control_cost(uk, du, p);
        for (slot, c) in costs.iter_mut().enumerate() {
            let st = RobotState::from_vector(&pts[slot]);
            *c += rs.eval(&goal_error(&st, &p.goal)) + crash_cost(&st, world, p.w_crash) + cc;
        }
        let w = clamp_control(ControlInput::new(uk.v + du.v, uk.omega + du.omega), &cfg.bounds);
        propagate_points(&mut pts, &w, cfg.dt);
        let (m2, c2) = reconstruct_moments(&pts, weights);
        mean = m2;
        cov = c2;
    }

    // Terminal cost at the propagated end points with the reconstructed end
    // covariance. A zero-length horizon scores the initial point set.
    if u.is_empty() && sigma_points_into(&mean, &cov, &cfg.ut, &mut pts).is_err() {
        return vec![real::<T>(f64::INFINITY); entries];
    }
    sink.record(&mean, &cov, &pts);
    let rs = RsStepCost::new(&p.q_diag, p.gamma, &cov);
    for (slot, c) in costs.iter_mut().enumerate() {
        let st = RobotState::from_vector(&pts[slot]);
        *c += rs.eval(&goal_error(&st, &p.goal)) + crash_cost(&st, world, p.w_crash);
    }

    for c in &mut costs {
        if !c.is_finite() {
            *c = real::<T>(f64::INFINITY);
        }
    }
    costs
}

fn rollout_row<T, C, S>(
    start: &RobotState<T>,
    cfg: &ControllerConfig<T>,
    world: &C,
    u: &[ControlInput<T>],
    noise: &[ControlInput<T>],
    weights: &UtWeights<T>,
    sink: &mut S,
) -> Vec<T>
where
    T: Real,
    C: CollisionQuery<T> + ?Sized,
    S: RolloutSink<T>,
{
    match cfg.mode {
        SamplingMode::Mppi => vec![rollout_mppi(start, cfg, world, u, noise, sink)],
        SamplingMode::UmppiSm0 => {
            rollout_unscented(start, cfg, world, u, noise, weights, false, sink)
        }
        SamplingMode::UmppiSm1 => {
            rollout_unscented(start, cfg, world, u, noise, weights, true, sink)
        }
    }
}

/// Simulates and scores a single batch, additionally returning its recorded
/// evolution (for inspection and plotting; the optimization path skips the
/// recording).
pub fn rollout_batch<T, C>(
    start: &RobotState<T>,
    cfg: &ControllerConfig<T>,
    world: &C,
    u: &[ControlInput<T>],
    noise: &[ControlInput<T>],
) -> Result<(Vec<T>, SigmaBatch<T>), ControllerError>
where
    T: Real,
    C: CollisionQuery<T> + ?Sized,
{
    if u.len() != noise.len() {
        return Err(ControllerError::BadConfig(format!(
            "nominal sequence length {} does not match noise column length {}",
            u.len(),
            noise.len()
        )));
    }
    let weights =
        ut_weights(&cfg.ut).map_err(|e| ControllerError::BadConfig(format!("ut: {e}")))?;
    let mut record = SigmaBatch {
        means: Vec::with_capacity(u.len() + 1),
        covs: Vec::with_capacity(u.len() + 1),
        points: Vec::new(),
        points_per_step: 1,
    };
    let costs = rollout_row(start, cfg, world, u, noise, &weights, &mut record);
    Ok((costs, record))
}

/// Simulates and scores every batch of one optimization pass in parallel.
/// Batches are independent, so the result does not depend on scheduling.
pub fn evaluate_rollouts<T, C>(
    start: &RobotState<T>,
    cfg: &ControllerConfig<T>,
    world: &C,
    u: &[ControlInput<T>],
    noise: &NoiseTensor<T>,
) -> Result<RolloutCosts<T>, ControllerError>
where
    T: Real,
    C: CollisionQuery<T> + Sync + ?Sized,
{
    let weights =
        ut_weights(&cfg.ut).map_err(|e| ControllerError::BadConfig(format!("ut: {e}")))?;
    Ok(evaluate_rollouts_with(start, cfg, world, u, noise, &weights))
}

fn evaluate_rollouts_with<T, C>(
    start: &RobotState<T>,
    cfg: &ControllerConfig<T>,
    world: &C,
    u: &[ControlInput<T>],
    noise: &NoiseTensor<T>,
    weights: &UtWeights<T>,
) -> RolloutCosts<T>
where
    T: Real,
    C: CollisionQuery<T> + Sync + ?Sized,
{
    let entries = cfg.entries_per_batch();
    let rows: Vec<Vec<T>> = (0..noise.batches())
        .into_par_iter()
        .map(|m| rollout_row(start, cfg, world, u, noise.column(m), weights, &mut NoRecord))
        .collect();
    let mut values = Vec::with_capacity(noise.batches() * entries);
    for row in rows {
        values.extend(row);
    }
    RolloutCosts::new(values, entries)
}

/// Reduction summary of one weighted update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateStats<T> {
    /// Minimum finite cost-to-go of the pass.
    pub s_min: T,
    /// Effective sample size `(Σw)² / Σw²` over all scored trajectories.
    pub ess: T,
}

/// Applies the exponentially weighted perturbation average to the nominal
/// sequence in place: `u_k += Σ_m w_m δu_{k,m} / Σ_m w_m`, where a batch's
/// weight is the sum of `exp(-(S̃ - S̃_min)/λ)` over its scored trajectories
/// and rejected (non-finite) trajectories contribute zero.
pub fn update_controls<T: Real>(
    u: &mut [ControlInput<T>],
    costs: &RolloutCosts<T>,
    noise: &NoiseTensor<T>,
    lambda: T,
) -> Result<UpdateStats<T>, ControllerError> {
    assert_eq!(costs.batches(), noise.batches(), "cost/noise batch mismatch");
    assert_eq!(u.len(), noise.horizon(), "sequence/noise horizon mismatch");
    let s_min = costs.s_min().ok_or(ControllerError::NoFeasibleRollout)?;
    let inv_lambda = T::one() / lambda;
    let batches = costs.batches();
    let mut batch_w = vec![T::zero(); batches];
    let mut denom = T::zero();
    let mut sum_sq = T::zero();
    for (m, bw) in batch_w.iter_mut().enumerate() {
        let mut acc = T::zero();
        for &s in costs.batch(m) {
            if s.is_finite() {
                let w = (-(s - s_min) * inv_lambda).exp();
                acc += w;
                sum_sq += w * w;
            }
        }
        *bw = acc;
        denom += acc;
    }
    if !(denom > T::zero() && denom.is_finite()) {
        return Err(ControllerError::NoFeasibleRollout);
    }
    let mut num = vec![ControlInput::<T>::zero(); u.len()];
    for (m, &bw) in batch_w.iter().enumerate() {
        if bw == T::zero() {
            continue;
        }
        for (acc, du) in num.iter_mut().zip(noise.column(m)) {
            acc.v += bw * du.v;
            acc.omega += bw * du.omega;
        }
    }
    for (uk, acc) in u.iter_mut().zip(&num) {
        uk.v += acc.v / denom;
        uk.omega += acc.omega / denom;
    }
    Ok(UpdateStats { s_min, ess: denom * denom / sum_sq })
}

/// Savitzky-Golay smoother: per-component convolution with the least-squares
/// polynomial-fit kernel, mirror-padded at the edges. When the window is
/// longer than the sequence, a single polynomial of the configured order is
/// fitted to the whole sequence instead.
#[derive(Clone, Debug)]
pub struct SgFilter<T> {
    window: usize,
    order: usize,
    kernel: Vec<T>,
}

impl<T: Real> SgFilter<T> {
    pub fn new(window: usize, order: usize) -> Result<Self, ControllerError> {
        if window == 0 || window % 2 == 0 {
            return Err(ControllerError::BadConfig("sg window must be odd".into()));
        }
        if order >= window {
            return Err(ControllerError::BadConfig(
                "sg order must be below the window length".into(),
            ));
        }
        let kernel = center_kernel(window, order).ok_or_else(|| {
            ControllerError::BadConfig("sg window/order combination is numerically singular".into())
        })?;
        Ok(SgFilter { window, order, kernel })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// The center-point convolution kernel (length = window).
    pub fn kernel(&self) -> &[T] {
        &self.kernel
    }

    /// Smooths one scalar series, mirror-padding the edges.
    pub fn smoothed(&self, xs: &[T]) -> Vec<T> {
        let n = xs.len();
        if n == 0 {
            return Vec::new();
        }
        if self.window > n {
            return polyfit_series(xs, self.order);
        }
        let h = (self.window / 2) as isize;
        (0..n as isize)
            .map(|j| {
                let mut acc = T::zero();
                for (t, &w) in self.kernel.iter().enumerate() {
                    let mut idx = j - h + t as isize;
                    if idx < 0 {
                        idx = -idx;
                    } else if idx >= n as isize {
                        idx = 2 * (n as isize - 1) - idx;
                    }
                    acc += w * xs[idx as usize];
                }
                acc
            })
            .collect()
    }

    /// Smooths both components of a control sequence in place.
    pub fn smooth_controls(&self, u: &mut [ControlInput<T>]) {
        let vs: Vec<T> = u.iter().map(|c| c.v).collect();
        let ws: Vec<T> = u.iter().map(|c| c.omega).collect();
        let vs = self.smoothed(&vs);
        let ws = self.smoothed(&ws);
        for (c, (v, w)) in u.iter_mut().zip(vs.into_iter().zip(ws)) {
            c.v = v;
            c.omega = w;
        }
    }
}

/// One-shot smoothing helper; prefer a cached [`SgFilter`] in loops.
pub fn sg_smooth<T: Real>(
    u: &mut [ControlInput<T>],
    window: usize,
    order: usize,
) -> Result<(), ControllerError> {
    SgFilter::new(window, order).map(|f| f.smooth_controls(u))
}

/// Least-squares fit of an `order`-degree polynomial over the window,
/// evaluated at the center: `kernel = A (AᵀA)⁻¹ e₀` with `A` the Vandermonde
/// matrix on abscissae scaled to [-1, 1] for conditioning.
fn center_kernel<T: Real>(window: usize, order: usize) -> Option<Vec<T>> {
    let h = (window / 2) as f64;
    let cols = order + 1;
    let a = DMatrix::<T>::from_fn(window, cols, |r, c| {
        real::<T>((r as f64 - h) / h.max(1.0)).powi(c as i32)
    });
    let ata = a.transpose() * &a;
    let chol = ata.cholesky()?;
    let mut e0 = DVector::<T>::zeros(cols);
    e0[0] = T::one();
    let y = chol.solve(&e0);
    Some((a * y).iter().copied().collect())
}

/// Replaces a series by the least-squares polynomial of the given order
/// fitted to all of it (interpolating when there are at most order + 1
/// points).
fn polyfit_series<T: Real>(xs: &[T], order: usize) -> Vec<T> {
    let n = xs.len();
    if n == 1 {
        return xs.to_vec();
    }
    let cols = (order + 1).min(n);
    let a = DMatrix::<T>::from_fn(n, cols, |r, c| {
        real::<T>(2.0 * r as f64 / (n as f64 - 1.0) - 1.0).powi(c as i32)
    });
    let rhs = DVector::<T>::from_column_slice(xs);
    let svd = a.clone().svd(true, true);
    match svd.solve(&rhs, real::<T>(1e-12)) {
        Ok(coeffs) => (a * coeffs).iter().copied().collect(),
        Err(_) => xs.to_vec(),
    }
}

/// Per-iteration diagnostics of one optimization pass.
#[derive(Clone, Copy, Debug)]
pub struct IterationDiag<T> {
    /// Zero-based index of the pass that produced this record.
    pub iteration: u64,
    /// Wall time of the pass [ms].
    pub t_exec_ms: f64,
    pub s_min: T,
    pub ess: T,
}

/// Result of one control step: the clamped control to apply now plus
/// diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput<T> {
    pub applied: ControlInput<T>,
    pub diag: IterationDiag<T>,
}

/// Receding-horizon sampling controller holding the warm-started nominal
/// control sequence.
pub struct Controller<T: Real> {
    cfg: ControllerConfig<T>,
    weights: UtWeights<T>,
    sg: SgFilter<T>,
    u: Vec<ControlInput<T>>,
    iteration: u64,
}

impl<T: Real> Controller<T> {
    pub fn new(cfg: ControllerConfig<T>) -> Result<Self, ControllerError> {
        cfg.validate()?;
        let weights =
            ut_weights(&cfg.ut).map_err(|e| ControllerError::BadConfig(format!("ut: {e}")))?;
        let sg = SgFilter::new(cfg.sg_window, cfg.sg_order)?;
        let u = vec![ControlInput::zero(); cfg.horizon];
        Ok(Controller { cfg, weights, sg, u, iteration: 0 })
    }

    pub fn config(&self) -> &ControllerConfig<T> {
        &self.cfg
    }

    /// The nominal control sequence as it stands (post-shift).
    pub fn nominal(&self) -> &[ControlInput<T>] {
        &self.u
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Back to the zero-initialized sequence and iteration count.
    pub fn reset(&mut self) {
        self.u.fill(ControlInput::zero());
        self.iteration = 0;
    }

    /// Retarget the tracking cost (for waypoint missions) while keeping the
    /// warm-started sequence.
    pub fn set_goal(&mut self, goal: RobotState<T>) {
        self.cfg.costs.goal = goal;
    }

    /// One full optimization pass: draw noise, roll out all batches in
    /// parallel, reweight the sequence, smooth it, emit the first control
    /// (clamped to the actuator bounds), and shift the sequence left with a
    /// zeroed final entry.
    pub fn control_step<C>(
        &mut self,
        state: &RobotState<T>,
        world: &C,
    ) -> Result<StepOutput<T>, ControllerError>
    where
        C: CollisionQuery<T> + Sync + ?Sized,
    {
        let t0 = Instant::now();
        let noise = sample_noise(&self.cfg, self.iteration);
        let costs = evaluate_rollouts_with(state, &self.cfg, world, &self.u, &noise, &self.weights);
        let stats = update_controls(&mut self.u, &costs, &noise, self.cfg.costs.lambda)?;
        self.sg.smooth_controls(&mut self.u);
        let applied = clamp_control(self.u[0], &self.cfg.bounds);
        self.u.rotate_left(1);
        *self.u.last_mut().expect("horizon >= 1") = ControlInput::zero();
        let diag = IterationDiag {
            iteration: self.iteration,
            t_exec_ms: t0.elapsed().as_secs_f64() * 1e3,
            s_min: stats.s_min,
            ess: stats.ess,
        };
        self.iteration += 1;
        Ok(StepOutput { applied, diag })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    struct FreeSpace;

    impl CollisionQuery<f64> for FreeSpace {
        fn is_collision_point(&self, _x: f64, _y: f64) -> bool {
            false
        }
    }

    /// Everything right of `x = 1` collides.
    struct WallAfterOne;

    impl CollisionQuery<f64> for WallAfterOne {
        fn is_collision_point(&self, x: f64, _y: f64) -> bool {
            x > 1.0
        }
    }

    fn test_costs(goal: RobotState<f64>) -> CostParams<f64> {
        CostParams {
            q_diag: Vector3::new(2.5, 2.5, 2.0),
            gamma: 1.0,
            w_crash: 1e3,
            r: nalgebra::Matrix2::new(3.77, 0.0, 0.0, 3.42),
            nu: 1200.0,
            lambda: 0.572,
            goal,
        }
    }

    fn test_cfg(mode: SamplingMode) -> ControllerConfig<f64> {
        ControllerConfig {
            horizon: 20,
            rollouts: 70,
            mode,
            sigma_u: Vector2::new(0.023, 0.028),
            sigma_0: Matrix3::identity() * 1e-3,
            dt: 1.0 / 30.0,
            ut: UtParams::defaults(3),
            costs: test_costs(RobotState::new(3.0, 0.0, 0.0)),
            bounds: ControlBounds::forward(2.0, 3.0),
            sg_window: 5,
            sg_order: 2,
            seed: 7,
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed_and_iteration() {
        let cfg = test_cfg(SamplingMode::Mppi);
        let a = sample_noise(&cfg, 3);
        let b = sample_noise(&cfg, 3);
        assert_eq!(a, b);
        let c = sample_noise(&cfg, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_sigma_u_gives_zero_noise() {
        let mut cfg = test_cfg(SamplingMode::Mppi);
        cfg.sigma_u = Vector2::zeros();
        let noise = sample_noise(&cfg, 0);
        assert!(noise
            .column(0)
            .iter()
            .all(|du| du.v == 0.0 && du.omega == 0.0));
    }

    #[test]
    fn noise_sample_variance_matches_config() {
        let mut cfg = test_cfg(SamplingMode::Mppi);
        cfg.horizon = 100;
        cfg.rollouts = 1200;
        let noise = sample_noise(&cfg, 0);
        let n = (cfg.horizon * cfg.rollouts) as f64;
        assert!(n >= 1e5);
        let (mut sv, mut sw) = (0.0, 0.0);
        for m in 0..noise.batches() {
            for du in noise.column(m) {
                sv += du.v * du.v;
                sw += du.omega * du.omega;
            }
        }
        assert_relative_eq!(sv / n, 0.023, max_relative = 0.05);
        assert_relative_eq!(sw / n, 0.028, max_relative = 0.05);
    }

    #[test]
    fn sm1_splits_rollouts_into_full_batches() {
        let mut cfg = test_cfg(SamplingMode::UmppiSm1);
        cfg.rollouts = 100;
        assert_eq!(cfg.ut.n_sigma(), 7);
        assert_eq!(cfg.batches(), 14);
        assert_eq!(cfg.entries_per_batch(), 7);
        cfg.mode = SamplingMode::UmppiSm0;
        assert_eq!(cfg.batches(), 100);
        assert_eq!(cfg.entries_per_batch(), 1);
    }

    fn tensor_from(columns: Vec<Vec<ControlInput<f64>>>) -> NoiseTensor<f64> {
        let horizon = columns[0].len();
        let batches = columns.len();
        let mut data = Vec::new();
        for col in columns {
            assert_eq!(col.len(), horizon);
            data.extend(col);
        }
        NoiseTensor { horizon, batches, data }
    }

    #[test]
    fn single_sample_update_adds_its_noise_exactly() {
        let mut u = vec![ControlInput::new(0.4, -0.2); 3];
        let noise = tensor_from(vec![vec![
            ControlInput::new(0.1, 0.2),
            ControlInput::new(-0.3, 0.05),
            ControlInput::new(0.0, -0.1),
        ]]);
        let costs = RolloutCosts::new(vec![5.0], 1);
        let stats = update_controls(&mut u, &costs, &noise, 0.5).unwrap();
        assert_eq!(u[0], ControlInput::new(0.4 + 0.1, -0.2 + 0.2));
        assert_eq!(u[1], ControlInput::new(0.4 - 0.3, -0.2 + 0.05));
        assert_eq!(u[2], ControlInput::new(0.4, -0.2 - 0.1));
        assert_relative_eq!(stats.ess, 1.0);
        assert_eq!(stats.s_min, 5.0);
    }

    #[test]
    fn equal_costs_average_the_noise() {
        let mut u = vec![ControlInput::zero(); 1];
        let noise = tensor_from(vec![
            vec![ControlInput::new(0.2, 0.4)],
            vec![ControlInput::new(0.4, -0.2)],
        ]);
        let costs = RolloutCosts::new(vec![3.0, 3.0], 1);
        let stats = update_controls(&mut u, &costs, &noise, 0.5).unwrap();
        assert_relative_eq!(u[0].v, 0.3, epsilon = 1e-15);
        assert_relative_eq!(u[0].omega, 0.1, epsilon = 1e-15);
        assert_relative_eq!(stats.ess, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn tiny_lambda_selects_the_argmin_sample() {
        let mut u = vec![ControlInput::zero(); 1];
        let noise = tensor_from(vec![
            vec![ControlInput::new(0.2, 0.4)],
            vec![ControlInput::new(-0.6, 0.1)],
        ]);
        let costs = RolloutCosts::new(vec![2.0, 1.0], 1);
        update_controls(&mut u, &costs, &noise, 1e-9).unwrap();
        assert_abs_diff_eq!(u[0].v, -0.6, epsilon = 1e-6);
        assert_abs_diff_eq!(u[0].omega, 0.1, epsilon = 1e-6);
    }

    #[test]
    fn update_is_invariant_to_constant_cost_shift() {
        let noise = tensor_from(vec![
            vec![ControlInput::new(0.2, 0.4), ControlInput::new(0.0, 0.1)],
            vec![ControlInput::new(-0.6, 0.1), ControlInput::new(0.3, 0.0)],
            vec![ControlInput::new(0.1, -0.2), ControlInput::new(-0.1, 0.2)],
        ]);
        let base = vec![1.0, 4.0, 2.5];
        let shifted: Vec<f64> = base.iter().map(|c| c + 137.0).collect();
        let mut u_a = vec![ControlInput::new(0.5, 0.0); 2];
        let mut u_b = u_a.clone();
        update_controls(&mut u_a, &RolloutCosts::new(base, 1), &noise, 0.7).unwrap();
        update_controls(&mut u_b, &RolloutCosts::new(shifted, 1), &noise, 0.7).unwrap();
        assert_eq!(u_a, u_b);
    }

    #[test]
    fn infinite_costs_are_excluded_and_all_infinite_errors() {
        let noise = tensor_from(vec![
            vec![ControlInput::new(0.2, 0.4)],
            vec![ControlInput::new(-0.6, 0.1)],
        ]);
        let mut u = vec![ControlInput::zero(); 1];
        let costs = RolloutCosts::new(vec![f64::INFINITY, 1.0], 1);
        update_controls(&mut u, &costs, &noise, 0.5).unwrap();
        assert_eq!(u[0], ControlInput::new(-0.6, 0.1));

        let all_bad = RolloutCosts::new(vec![f64::INFINITY, f64::INFINITY], 1);
        assert!(all_bad.s_min().is_none());
        let err = update_controls(&mut u, &all_bad, &noise, 0.5).unwrap_err();
        assert_eq!(err, ControllerError::NoFeasibleRollout);
    }

    #[test]
    fn sg_keeps_constants_in_both_paths() {
        let filter = SgFilter::<f64>::new(5, 2).unwrap();
        let xs = vec![1.25; 9];
        for (a, b) in filter.smoothed(&xs).iter().zip(&xs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let long = SgFilter::<f64>::new(61, 5).unwrap();
        let short = vec![-0.75; 8];
        for (a, b) in long.smoothed(&short).iter().zip(&short) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn sg_reproduces_quintic_polynomials_at_interior_points() {
        let filter = SgFilter::<f64>::new(61, 5).unwrap();
        let poly = |t: f64| 0.3 - 0.7 * t + 0.02 * t * t - 1e-4 * t * t * t
            + 2e-6 * t * t * t * t - 3e-8 * t * t * t * t * t;
        let xs: Vec<f64> = (0..200).map(|i| poly(i as f64)).collect();
        let ys = filter.smoothed(&xs);
        for j in 30..170 {
            assert_abs_diff_eq!(ys[j], xs[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn sg_kernel_is_symmetric_and_spreads_an_impulse() {
        let filter = SgFilter::<f64>::new(7, 2).unwrap();
        let k = filter.kernel();
        for i in 0..k.len() / 2 {
            assert_abs_diff_eq!(k[i], k[k.len() - 1 - i], epsilon = 1e-12);
        }
        let mut xs = vec![0.0; 21];
        xs[10] = 1.0;
        let ys = filter.smoothed(&xs);
        assert!(ys[10] < 1.0);
        for d in 1..=3 {
            assert_abs_diff_eq!(ys[10 - d], ys[10 + d], epsilon = 1e-12);
        }
    }

    #[test]
    fn sg_fallback_fits_one_polynomial_to_short_sequences() {
        let filter = SgFilter::<f64>::new(61, 5).unwrap();
        let xs: Vec<f64> = (0..10).map(|i| 2.0 + 0.5 * i as f64 - 0.03 * (i * i) as f64).collect();
        let ys = filter.smoothed(&xs);
        for (a, b) in ys.iter().zip(&xs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn rollout_at_goal_with_no_noise_costs_nothing() {
        let mut cfg = test_cfg(SamplingMode::Mppi);
        cfg.costs.goal = RobotState::new(0.0, 0.0, 0.0);
        let zeros = vec![ControlInput::zero(); cfg.horizon];
        let (costs, record) = rollout_batch(
            &RobotState::new(0.0, 0.0, 0.0),
            &cfg,
            &FreeSpace,
            &zeros,
            &zeros,
        )
        .unwrap();
        assert_eq!(costs, vec![0.0]);
        assert_eq!(record.means.len(), cfg.horizon + 1);
        assert_eq!(record.points_per_step, 1);
    }

    #[test]
    fn zero_horizon_rollout_scores_only_the_terminal_state() {
        let mut cfg = test_cfg(SamplingMode::Mppi);
        cfg.horizon = 0;
        let start = RobotState::new(1.0, -1.0, 0.3);
        let (costs, _) = rollout_batch(&start, &cfg, &FreeSpace, &[], &[]).unwrap();
        assert_relative_eq!(costs[0], quadratic_state_cost(&start, &cfg.costs));

        let mut ucfg = test_cfg(SamplingMode::UmppiSm1);
        ucfg.horizon = 0;
        let (ucosts, rec) = rollout_batch(&start, &ucfg, &FreeSpace, &[], &[]).unwrap();
        assert_eq!(ucosts.len(), 7);
        assert_eq!(rec.points_per_step, 7);
        let expected = crate::costs::risk_sensitive_state_cost(&start, &ucfg.sigma_0, &ucfg.costs);
        assert_relative_eq!(ucosts[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn collapsed_unscented_batch_equals_plain_rollout() {
        let mut plain = test_cfg(SamplingMode::Mppi);
        plain.costs.gamma = 0.0;
        let mut collapsed = plain.clone();
        collapsed.mode = SamplingMode::UmppiSm1;
        collapsed.sigma_0 = Matrix3::zeros();

        let u: Vec<ControlInput<f64>> =
            (0..plain.horizon).map(|k| ControlInput::new(0.5 + 0.01 * k as f64, -0.1)).collect();
        let noise = sample_noise(&plain, 0);
        let start = RobotState::new(0.2, -0.4, 0.7);

        let (mppi_cost, _) =
            rollout_batch(&start, &plain, &WallAfterOne, &u, noise.column(0)).unwrap();
        let (sm1_costs, rec) =
            rollout_batch(&start, &collapsed, &WallAfterOne, &u, noise.column(0)).unwrap();
        assert_eq!(sm1_costs.len(), 7);
        for c in &sm1_costs {
            assert_abs_diff_eq!(c, &mppi_cost[0], epsilon = 1e-12);
        }
        // The covariance stays exactly collapsed the whole way down.
        assert!(rec.covs.iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn crashing_rollouts_pay_the_crash_penalty() {
        let mut cfg = test_cfg(SamplingMode::Mppi);
        cfg.costs.goal = RobotState::new(3.0, 0.0, 0.0);
        // Drive straight into the x > 1 wall.
        let u = vec![ControlInput::new(2.0, 0.0); cfg.horizon];
        let zeros = vec![ControlInput::zero(); cfg.horizon];
        let (hit, _) = rollout_batch(
            &RobotState::new(0.9, 0.0, 0.0),
            &cfg,
            &WallAfterOne,
            &u,
            &zeros,
        )
        .unwrap();
        let (free, _) = rollout_batch(
            &RobotState::new(0.9, 0.0, 0.0),
            &cfg,
            &FreeSpace,
            &u,
            &zeros,
        )
        .unwrap();
        assert!(hit[0] > free[0] + cfg.costs.w_crash);
    }

    #[test]
    fn controller_drives_toward_the_goal_in_free_space() {
        let mut cfg = test_cfg(SamplingMode::Mppi);
        cfg.horizon = 40;
        cfg.rollouts = 250;
        cfg.dt = 0.05;
        cfg.costs.goal = RobotState::new(2.0, 0.0, 0.0);
        let mut controller = Controller::new(cfg).unwrap();
        let mut state = RobotState::new(0.0, 0.0, 0.0);
        let mut saw_forward_motion = false;
        for _ in 0..120 {
            let out = controller.control_step(&state, &FreeSpace).unwrap();
            if out.applied.v > 0.1 {
                saw_forward_motion = true;
            }
            state = step(&state, &out.applied, 0.05);
        }
        assert!(saw_forward_motion);
        assert!(
            state.position_distance(&RobotState::new(2.0, 0.0, 0.0)) < 0.5,
            "ended at ({}, {})",
            state.x,
            state.y
        );
    }

    #[test]
    fn no_exploration_and_zero_nominal_yields_zero_control() {
        let mut cfg = test_cfg(SamplingMode::Mppi);
        cfg.sigma_u = Vector2::zeros();
        let mut controller = Controller::new(cfg).unwrap();
        let out = controller
            .control_step(&RobotState::new(0.0, 0.0, 0.0), &FreeSpace)
            .unwrap();
        assert_eq!(out.applied, ControlInput::zero());
    }

    #[test]
    fn control_steps_are_bit_deterministic() {
        for mode in [SamplingMode::Mppi, SamplingMode::UmppiSm0, SamplingMode::UmppiSm1] {
            let mut a = Controller::new(test_cfg(mode)).unwrap();
            let mut b = Controller::new(test_cfg(mode)).unwrap();
            let mut state = RobotState::new(0.1, 0.2, -0.3);
            for _ in 0..3 {
                let oa = a.control_step(&state, &FreeSpace).unwrap();
                let ob = b.control_step(&state, &FreeSpace).unwrap();
                assert_eq!(oa.applied, ob.applied);
                assert_eq!(oa.diag.s_min, ob.diag.s_min);
                assert_eq!(oa.diag.ess, ob.diag.ess);
                state = step(&state, &oa.applied, 1.0 / 30.0);
            }
        }
    }

    #[test]
    fn applied_controls_respect_bounds_under_large_noise() {
        let mut cfg = test_cfg(SamplingMode::UmppiSm1);
        cfg.sigma_u = Vector2::new(4.0, 9.0);
        let mut controller = Controller::new(cfg).unwrap();
        let bounds = controller.config().bounds;
        let mut state = RobotState::new(0.0, 0.0, 0.0);
        for _ in 0..5 {
            let out = controller.control_step(&state, &FreeSpace).unwrap();
            assert!(bounds.contains(&out.applied));
            state = step(&state, &out.applied, 1.0 / 30.0);
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let ok = test_cfg(SamplingMode::UmppiSm1);
        assert!(ok.validate().is_ok());

        let mut even_window = ok.clone();
        even_window.sg_window = 6;
        assert!(even_window.validate().is_err());

        let mut high_order = ok.clone();
        high_order.sg_order = high_order.sg_window;
        assert!(high_order.validate().is_err());

        let mut starved = ok.clone();
        starved.rollouts = 5;
        assert!(starved.validate().is_err());

        let mut bad_dt = ok.clone();
        bad_dt.dt = 0.0;
        assert!(bad_dt.validate().is_err());

        let mut zero_horizon = ok;
        zero_horizon.horizon = 0;
        assert!(zero_horizon.validate().is_err());
    }

    proptest! {
        #[test]
        fn prop_update_shift_invariance(
            base in proptest::collection::vec(0.0f64..50.0, 4),
            shift in -100.0f64..100.0,
        ) {
            let noise = tensor_from(vec![
                vec![ControlInput::new(0.2, 0.4)],
                vec![ControlInput::new(-0.6, 0.1)],
                vec![ControlInput::new(0.05, -0.3)],
                vec![ControlInput::new(-0.15, 0.25)],
            ]);
            let shifted: Vec<f64> = base.iter().map(|c| c + shift).collect();
            let mut u_a = vec![ControlInput::new(0.3, -0.1)];
            let mut u_b = u_a.clone();
            update_controls(&mut u_a, &RolloutCosts::new(base, 1), &noise, 0.8).unwrap();
            update_controls(&mut u_b, &RolloutCosts::new(shifted, 1), &noise, 0.8).unwrap();
            prop_assert!((u_a[0].v - u_b[0].v).abs() < 1e-12);
            prop_assert!((u_a[0].omega - u_b[0].omega).abs() < 1e-12);
        }

        #[test]
        fn prop_sg_preserves_constants(
            window in (0usize..7).prop_map(|k| 2 * k + 1),
            order_frac in 0.0f64..1.0,
            n in 1usize..40,
            value in -10.0f64..10.0,
        ) {
            let order = ((window as f64 - 1.0) * order_frac) as usize;
            let filter = SgFilter::<f64>::new(window, order).unwrap();
            let xs = vec![value; n];
            for y in filter.smoothed(&xs) {
                prop_assert!((y - value).abs() < 1e-9);
            }
        }
    }
}
