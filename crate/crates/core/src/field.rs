//! Closed-form scalar-field forward models.
//!
//! Three point-query backends share the [`ForwardModel`] interface used by the
//! sensor likelihood and the particle filter:
//!
//! * [`Plume2d`]: steady plume in the plane,
//!   `φ = q/(4πα r) · exp(-r/λ - (Δx·u_x + Δy·u_y)/(2α))`.
//! * [`Green3d`]: free-space Green's function of the steady
//!   advection–diffusion–reaction operator `-α∇²φ + v·∇φ + κφ`.
//! * [`HalfSpace3d`]: the 3D kernel plus an image source mirrored through
//!   `z = 0`, approximating a no-flux ground.
//!
//! Wind is stored everywhere in the planar convention (the field grows on the
//! side *against* the stored vector). The 3D kernel is written for the
//! opposite sign, so [`ThetaVector3D::kernel_velocity`] negates the stored
//! wind before it reaches [`green_kernel`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{norm, Scalar};

/// Queries closer than this to a source are rejected as singular.
pub const SINGULAR_RADIUS: f64 = 1e-9;
/// Decay lengths are clamped to at least this value.
pub const LAMBDA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("query point is within {radius:e} of a source (distance {distance:e})")]
    Singular { distance: f64, radius: f64 },
    #[error("invalid parameter `{name}` = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

fn check_finite<T: Scalar>(name: &'static str, v: T) -> Result<T, FieldError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FieldError::InvalidParameter { name, value: v.f64() })
    }
}

fn check_positive<T: Scalar>(name: &'static str, v: T) -> Result<T, FieldError> {
    if v.is_finite() && v > T::zero() {
        Ok(v)
    } else {
        Err(FieldError::InvalidParameter { name, value: v.f64() })
    }
}

/// Unknown parameters of the planar plume, in the order
/// `[x_s, y_s, q_s, u_x, u_y, alpha, lambda]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector<T> {
    pub x_s: T,
    pub y_s: T,
    pub q_s: T,
    pub u_x: T,
    pub u_y: T,
    pub alpha: T,
    pub lambda: T,
}

impl<T: Scalar> ThetaVector<T> {
    pub const DIM: usize = 7;
    pub const NAMES: [&'static str; 7] = ["x_s", "y_s", "q_s", "u_x", "u_y", "alpha", "lambda"];

    #[allow(clippy::too_many_arguments)]
    pub fn new(x_s: T, y_s: T, q_s: T, u_x: T, u_y: T, alpha: T, lambda: T) -> Result<Self, FieldError> {
        let lambda = check_finite("lambda", lambda)?.max(T::c(LAMBDA_FLOOR));
        Ok(Self {
            x_s: check_finite("x_s", x_s)?,
            y_s: check_finite("y_s", y_s)?,
            q_s: check_positive("q_s", q_s)?,
            u_x: check_finite("u_x", u_x)?,
            u_y: check_finite("u_y", u_y)?,
            alpha: check_positive("alpha", alpha)?,
            lambda,
        })
    }

    pub fn from_slice(v: &[T]) -> Result<Self, FieldError> {
        if v.len() != Self::DIM {
            return Err(FieldError::DimensionMismatch { expected: Self::DIM, got: v.len() });
        }
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6])
    }

    pub fn to_array(&self) -> [T; 7] {
        [self.x_s, self.y_s, self.q_s, self.u_x, self.u_y, self.alpha, self.lambda]
    }

    pub fn location(&self) -> [T; 2] {
        [self.x_s, self.y_s]
    }
}

/// Unknown parameters of the 3D field, in the order
/// `[x_s, y_s, z_s, q_s, v_x, v_y, v_z, alpha, lambda]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector3D<T> {
    pub p_s: [T; 3],
    pub q_s: T,
    /// Wind in the planar convention.
    pub v: [T; 3],
    pub alpha: T,
    pub lambda: T,
}

impl<T: Scalar> ThetaVector3D<T> {
    pub const DIM: usize = 9;
    pub const NAMES: [&'static str; 9] =
        ["x_s", "y_s", "z_s", "q_s", "v_x", "v_y", "v_z", "alpha", "lambda"];

    pub fn new(p_s: [T; 3], q_s: T, v: [T; 3], alpha: T, lambda: T) -> Result<Self, FieldError> {
        for (i, &c) in p_s.iter().enumerate() {
            check_finite(["x_s", "y_s", "z_s"][i], c)?;
        }
        for (i, &c) in v.iter().enumerate() {
            check_finite(["v_x", "v_y", "v_z"][i], c)?;
        }
        Ok(Self {
            p_s,
            q_s: check_positive("q_s", q_s)?,
            v,
            alpha: check_positive("alpha", alpha)?,
            lambda: check_finite("lambda", lambda)?.max(T::c(LAMBDA_FLOOR)),
        })
    }

    pub fn from_slice(s: &[T]) -> Result<Self, FieldError> {
        if s.len() != Self::DIM {
            return Err(FieldError::DimensionMismatch { expected: Self::DIM, got: s.len() });
        }
        Self::new([s[0], s[1], s[2]], s[3], [s[4], s[5], s[6]], s[7], s[8])
    }

    pub fn to_array(&self) -> [T; 9] {
        [
            self.p_s[0], self.p_s[1], self.p_s[2], self.q_s, self.v[0], self.v[1], self.v[2], self.alpha,
            self.lambda,
        ]
    }

    /// Decay rate `m = 1/λ`.
    pub fn decay_rate(&self) -> T {
        T::one() / self.lambda
    }

    /// Velocity as seen by [`green_kernel`] (stored wind negated).
    pub fn kernel_velocity(&self) -> [T; 3] {
        [-self.v[0], -self.v[1], -self.v[2]]
    }

    /// Reaction coefficient implied by `(α, λ, v)`: `κ = α/λ² - ‖v‖²/(4α)`.
    /// May be negative; the kernel never uses it.
    pub fn implied_kappa(&self) -> T {
        let v2 = self.v.iter().fold(T::zero(), |a, &x| a + x * x);
        self.alpha / (self.lambda * self.lambda) - v2 / (T::c(4.0) * self.alpha)
    }
}

#[inline]
fn plume2d_from_delta<T: Scalar>(dx: T, dy: T, r: T, th: &[T]) -> T {
    let (q, ux, uy, alpha) = (th[2], th[3], th[4], th[5]);
    let lambda = th[6].max(T::c(LAMBDA_FLOOR));
    let four_pi = T::c(4.0) * T::PI();
    q / (four_pi * alpha * r) * (-r / lambda - (dx * ux + dy * uy) / (T::c(2.0) * alpha)).exp()
}

/// Planar plume intensity at `p`.
pub fn plume2d_eval<T: Scalar>(p: [T; 2], theta: &ThetaVector<T>) -> Result<T, FieldError> {
    Plume2d.eval(&p, &theta.to_array())
}

/// 3D Green's function in the decay-rate form,
/// `q/(4πα‖r‖) · exp(βᵀr - m‖r‖)` with `β = v/(2α)`.
///
/// `v` is the kernel velocity (see [`ThetaVector3D::kernel_velocity`]).
pub fn green_kernel<T: Scalar>(r: [T; 3], q: T, v: [T; 3], alpha: T, m: T) -> Result<T, FieldError> {
    let dist = checked_distance(&r)?;
    let two_alpha = T::c(2.0) * alpha;
    let beta = [v[0] / two_alpha, v[1] / two_alpha, v[2] / two_alpha];
    let beta_r = beta[0] * r[0] + beta[1] * r[1] + beta[2] * r[2];
    Ok(q / (T::c(4.0) * T::PI() * alpha) / dist * (beta_r - m * dist).exp())
}

/// 3D free-space intensity at `p`.
pub fn green3d_eval<T: Scalar>(p: [T; 3], theta: &ThetaVector3D<T>) -> Result<T, FieldError> {
    Green3d.eval(&p, &theta.to_array())
}

/// Half-space intensity at `p` (real source plus image at `(x_s, y_s, -z_s)`).
pub fn halfspace_eval<T: Scalar>(p: [T; 3], theta: &ThetaVector3D<T>) -> Result<T, FieldError> {
    HalfSpace3d.eval(&p, &theta.to_array())
}

/// Central-difference residual `-α∇²φ + v·∇φ + κφ` at `p` with step `h`.
pub fn pde_residual<T, F>(field: F, p: [T; 3], alpha: T, v: [T; 3], kappa: T, h: T) -> Result<T, FieldError>
where
    T: Scalar,
    F: Fn([T; 3]) -> Result<T, FieldError>,
{
    let center = field(p)?;
    let two = T::c(2.0);
    let mut laplacian = T::zero();
    let mut advection = T::zero();
    for axis in 0..3 {
        let mut fwd = p;
        let mut bwd = p;
        fwd[axis] = fwd[axis] + h;
        bwd[axis] = bwd[axis] - h;
        let (f_plus, f_minus) = (field(fwd)?, field(bwd)?);
        laplacian = laplacian + (f_plus - two * center + f_minus) / (h * h);
        advection = advection + v[axis] * (f_plus - f_minus) / (two * h);
    }
    Ok(-alpha * laplacian + advection + kappa * center)
}

/// Uniform point-query interface over flat parameter slices.
pub trait ForwardModel<T: Scalar>: Send + Sync {
    fn theta_dim(&self) -> usize;
    fn pose_dim(&self) -> usize;
    /// Indices of the source-location block inside a parameter slice.
    fn location_indices(&self) -> &'static [usize];
    fn param_names(&self) -> &'static [&'static str];
    /// Exact evaluation; errors inside [`SINGULAR_RADIUS`] of any source.
    fn eval(&self, pose: &[T], theta: &[T]) -> Result<T, FieldError>;
    /// Evaluation with the source distance clamped to at least
    /// [`SINGULAR_RADIUS`].
    fn eval_clamped(&self, pose: &[T], theta: &[T]) -> T;
}

/// Planar plume backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Plume2d;

/// Free-space 3D backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Green3d;

/// Half-space 3D backend with a ground image source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HalfSpace3d;

impl<T: Scalar> ForwardModel<T> for Plume2d {
    fn theta_dim(&self) -> usize {
        7
    }
    fn pose_dim(&self) -> usize {
        2
    }
    fn location_indices(&self) -> &'static [usize] {
        &[0, 1]
    }
    fn param_names(&self) -> &'static [&'static str] {
        &ThetaVector::<f64>::NAMES
    }

    fn eval(&self, pose: &[T], theta: &[T]) -> Result<T, FieldError> {
        let (dx, dy) = (pose[0] - theta[0], pose[1] - theta[1]);
        let r = (dx * dx + dy * dy).sqrt();
        if !(r >= T::c(SINGULAR_RADIUS)) {
            return Err(FieldError::Singular { distance: r.f64(), radius: SINGULAR_RADIUS });
        }
        Ok(plume2d_from_delta(dx, dy, r, theta))
    }

    fn eval_clamped(&self, pose: &[T], theta: &[T]) -> T {
        let (mut dx, mut dy) = (pose[0] - theta[0], pose[1] - theta[1]);
        let mut r = (dx * dx + dy * dy).sqrt();
        let eps = T::c(SINGULAR_RADIUS);
        if !(r >= eps) {
            if r > T::zero() {
                dx = dx * eps / r;
                dy = dy * eps / r;
            } else {
                dx = eps;
                dy = T::zero();
            }
            r = eps;
        }
        plume2d_from_delta(dx, dy, r, theta)
    }
}

#[inline]
fn clamp_offset<T: Scalar>(mut r: [T; 3]) -> ([T; 3], T) {
    let eps = T::c(SINGULAR_RADIUS);
    let dist = norm(&r);
    if dist >= eps {
        return (r, dist);
    }
    if dist > T::zero() {
        for c in r.iter_mut() {
            *c = *c * eps / dist;
        }
    } else {
        r = [eps, T::zero(), T::zero()];
    }
    (r, eps)
}

#[inline]
fn green_slice_terms<T: Scalar>(theta: &[T]) -> (T, [T; 3], T, T) {
    let lambda = theta[8].max(T::c(LAMBDA_FLOOR));
    (theta[3], [-theta[4], -theta[5], -theta[6]], theta[7], lambda)
}

/// Decay-length form `q/(4πα‖r‖) · exp(vᵀr/(2α) - ‖r‖/λ)`.
#[inline]
fn green_lambda_form<T: Scalar>(r: [T; 3], dist: T, q: T, v: [T; 3], alpha: T, lambda: T) -> T {
    let two_alpha = T::c(2.0) * alpha;
    let v_r = v[0] * r[0] + v[1] * r[1] + v[2] * r[2];
    q / (T::c(4.0) * T::PI() * alpha * dist) * (v_r / two_alpha - dist / lambda).exp()
}

#[inline]
fn checked_distance<T: Scalar>(r: &[T; 3]) -> Result<T, FieldError> {
    let dist = norm(r);
    if dist >= T::c(SINGULAR_RADIUS) {
        Ok(dist)
    } else {
        Err(FieldError::Singular { distance: dist.f64(), radius: SINGULAR_RADIUS })
    }
}

impl<T: Scalar> ForwardModel<T> for Green3d {
    fn theta_dim(&self) -> usize {
        9
    }
    fn pose_dim(&self) -> usize {
        3
    }
    fn location_indices(&self) -> &'static [usize] {
        &[0, 1, 2]
    }
    fn param_names(&self) -> &'static [&'static str] {
        &ThetaVector3D::<f64>::NAMES
    }

    fn eval(&self, pose: &[T], theta: &[T]) -> Result<T, FieldError> {
        let (q, v, alpha, lambda) = green_slice_terms(theta);
        let r = [pose[0] - theta[0], pose[1] - theta[1], pose[2] - theta[2]];
        let dist = checked_distance(&r)?;
        Ok(green_lambda_form(r, dist, q, v, alpha, lambda))
    }

    fn eval_clamped(&self, pose: &[T], theta: &[T]) -> T {
        let (q, v, alpha, lambda) = green_slice_terms(theta);
        let (r, dist) = clamp_offset([pose[0] - theta[0], pose[1] - theta[1], pose[2] - theta[2]]);
        green_lambda_form(r, dist, q, v, alpha, lambda)
    }
}

impl<T: Scalar> ForwardModel<T> for HalfSpace3d {
    fn theta_dim(&self) -> usize {
        9
    }
    fn pose_dim(&self) -> usize {
        3
    }
    fn location_indices(&self) -> &'static [usize] {
        &[0, 1, 2]
    }
    fn param_names(&self) -> &'static [&'static str] {
        &ThetaVector3D::<f64>::NAMES
    }

    fn eval(&self, pose: &[T], theta: &[T]) -> Result<T, FieldError> {
        let (q, v, alpha, lambda) = green_slice_terms(theta);
        let real = [pose[0] - theta[0], pose[1] - theta[1], pose[2] - theta[2]];
        let image = [real[0], real[1], pose[2] + theta[2]];
        let (d1, d2) = (checked_distance(&real)?, checked_distance(&image)?);
        Ok(green_lambda_form(real, d1, q, v, alpha, lambda) + green_lambda_form(image, d2, q, v, alpha, lambda))
    }

    fn eval_clamped(&self, pose: &[T], theta: &[T]) -> T {
        let (q, v, alpha, lambda) = green_slice_terms(theta);
        let (real, d1) = clamp_offset([pose[0] - theta[0], pose[1] - theta[1], pose[2] - theta[2]]);
        let (image, d2) = clamp_offset([pose[0] - theta[0], pose[1] - theta[1], pose[2] + theta[2]]);
        green_lambda_form(real, d1, q, v, alpha, lambda) + green_lambda_form(image, d2, q, v, alpha, lambda)
    }
}
