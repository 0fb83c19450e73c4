//! Sampling-based stochastic model-predictive control for planar robots.
//!
//! The crate bundles two receding-horizon controllers sharing one code path:
//! classic path-integral control (`mppi`), which rolls out single
//! trajectories under sampled control noise, and an unscented variant that
//! propagates a sigma-point set per sampled control sequence so each rollout
//! carries its own state covariance. The covariance feeds a risk-sensitive
//! stage cost, trading expected progress against state uncertainty.
//!
//! Supporting modules provide the differential-drive model ([`dynamics`]),
//! sigma-point machinery ([`unscented`]), cost terms ([`costs`]), cluttered
//! world generation and occupancy grids ([`world`]), and an episode/benchmark
//! harness with CSV output ([`harness`]).
//!
//! All numeric code is generic over the [`Real`] scalar; `f64` aliases for
//! the main entry points live at the crate root.

use std::fmt::Display;
use std::iter::Sum;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::distributions::uniform::SampleUniform;
use rand::Rng;
use rand_distr::StandardNormal;

pub mod controller;
pub mod costs;
pub mod dynamics;
pub mod harness;
pub mod unscented;
pub mod world;

/// Scalar type the toolkit is generic over. Implemented for `f32` and `f64`.
pub trait Real:
    RealField
    + Copy
    + Default
    + Display
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Draws one standard-normal variate.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

impl Real for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

/// Converts an `f64` constant into the working scalar.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant must be representable")
}

pub type RobotState64 = dynamics::RobotState<f64>;
pub type ControlInput64 = dynamics::ControlInput<f64>;
pub type CostParams64 = costs::CostParams<f64>;
pub type ControllerConfig64 = controller::ControllerConfig<f64>;
pub type Controller64 = controller::Controller<f64>;
pub type ObstacleMap64 = world::ObstacleMap<f64>;
pub type Costmap64 = world::Costmap<f64>;
pub type EpisodeConfig64 = harness::EpisodeConfig<f64>;
pub type EpisodeResult64 = harness::EpisodeResult<f64>;
pub type BenchmarkConfig64 = harness::BenchmarkConfig<f64>;
