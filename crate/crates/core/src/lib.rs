//! Active source localization with a particle-filter teacher and a distilled
//! diagonal-Gaussian student.
//!
//! The closed-form layers ([`field`], [`sensor`], [`pf`], [`reward`],
//! [`stopping`]) are generic over [`Scalar`] (`f32`/`f64`). The learned
//! components ([`student`], [`policy`]) and the episode machinery in
//! [`runner`] work in `f64`; the aliases below fix the scalar for callers that
//! do not care.

pub mod field;
pub mod nn;
pub mod pf;
pub mod policy;
pub mod reward;
pub mod runner;
mod scalar;
pub mod sensor;
pub mod stopping;
pub mod student;

pub use scalar::Scalar;

/// 2D plume parameter vector in `f64`.
pub type Theta = field::ThetaVector<f64>;
/// 3D parameter vector in `f64`.
pub type Theta3 = field::ThetaVector3D<f64>;
/// Particle set in `f64`.
pub type Particles = pf::ParticleSet<f64>;
/// Sensor parameters in `f64`.
pub type Sensor = sensor::SensorParams<f64>;
/// Uniform box prior in `f64`.
pub type Prior = pf::BoxPrior<f64>;
/// Spread certificate in `f64`.
pub type Certificate = stopping::SpreadCertificate<f64>;
