//! Differential-drive kinematics and control-space primitives.

use nalgebra::Vector3;

use crate::Real;

/// Planar robot pose. `theta` accumulates without wrapping; cost terms wrap
/// heading differences where it matters.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RobotState<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Real> RobotState<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self { x, y, theta }
    }

    #[inline]
    pub fn to_vector(self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.theta)
    }

    #[inline]
    pub fn from_vector(v: &Vector3<T>) -> Self {
        Self { x: v[0], y: v[1], theta: v[2] }
    }

    /// Euclidean distance between the two positions, heading ignored.
    pub fn position_distance(&self, other: &Self) -> T {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Commanded linear and angular velocity.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ControlInput<T> {
    pub v: T,
    pub omega: T,
}

impl<T: Real> ControlInput<T> {
    pub fn new(v: T, omega: T) -> Self {
        Self { v, omega }
    }

    pub fn zero() -> Self {
        Self { v: T::zero(), omega: T::zero() }
    }
}

/// Box bounds on the control components.
#[derive(Clone, Copy, Debug)]
pub struct ControlBounds<T> {
    pub v_min: T,
    pub v_max: T,
    pub omega_min: T,
    pub omega_max: T,
}

impl<T: Real> ControlBounds<T> {
    pub fn new(v_min: T, v_max: T, omega_min: T, omega_max: T) -> Self {
        Self { v_min, v_max, omega_min, omega_max }
    }

    /// Forward-only velocity, symmetric turn rate.
    pub fn forward(v_max: T, omega_max: T) -> Self {
        Self { v_min: T::zero(), v_max, omega_min: -omega_max, omega_max }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.v_min <= self.v_max) {
            return Err(format!("v_min {} > v_max {}", self.v_min, self.v_max));
        }
        if !(self.omega_min <= self.omega_max) {
            return Err(format!(
                "omega_min {} > omega_max {}",
                self.omega_min, self.omega_max
            ));
        }
        Ok(())
    }

    pub fn contains(&self, u: &ControlInput<T>) -> bool {
        u.v >= self.v_min && u.v <= self.v_max && u.omega >= self.omega_min && u.omega <= self.omega_max
    }
}

#[inline]
fn clamp_scalar<T: Real>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Clamps each control component into its bounds. Total and idempotent;
/// non-finite inputs land on a bound.
#[inline]
pub fn clamp_control<T: Real>(u: ControlInput<T>, b: &ControlBounds<T>) -> ControlInput<T> {
    // NaN fails both comparisons in clamp_scalar, so map it to the lower
    // bound explicitly to keep the function total.
    let v = if u.v.is_finite() { clamp_scalar(u.v, b.v_min, b.v_max) } else if u.v > T::zero() { b.v_max } else { b.v_min };
    let omega = if u.omega.is_finite() {
        clamp_scalar(u.omega, b.omega_min, b.omega_max)
    } else if u.omega > T::zero() {
        b.omega_max
    } else {
        b.omega_min
    };
    ControlInput { v, omega }
}

/// One explicit-Euler step of the unicycle model.
#[inline]
pub fn step<T: Real>(s: &RobotState<T>, u: &ControlInput<T>, dt: T) -> RobotState<T> {
    let (sin_t, cos_t) = s.theta.sin_cos();
    RobotState {
        x: s.x + u.v * cos_t * dt,
        y: s.y + u.v * sin_t * dt,
        theta: s.theta + u.omega * dt,
    }
}

/// Difference `a - b` wrapped into `(-pi, pi]`.
#[inline]
pub fn angle_diff<T: Real>(a: T, b: T) -> T {
    let d = a - b;
    d.sin().atan2(d.cos())
}
