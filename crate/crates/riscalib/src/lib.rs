//! `riscalib` — simulation and bound-computation toolkit for localization with
//! reconfigurable intelligent surfaces (RIS) under geometry errors and
//! hardware impairments.
//!
//! The crate models a downlink OFDM link in which a base station illuminates a
//! RIS and a user receives the reflected cascade. On top of that physical
//! model it provides:
//!
//! - exact near-field (spherical-wavefront) cascade responses, wideband or
//!   narrowband ([`channel`]);
//! - misspecified and classical Cramér–Rao bounds for position estimation
//!   when the model assumed by the estimator disagrees with the true one —
//!   RIS pose errors, stuck-pixel failures, mutual-coupling miscalibration
//!   ([`bounds`]);
//! - maximum-likelihood localization and joint localization/failure diagnosis
//!   ([`estimators`]);
//! - mutual-impedance based coupling models for closely spaced elements
//!   ([`coupling`]);
//! - link-level utilities: pilot/data energy splits, beam selection under
//!   position uncertainty, spectral-efficiency optimization ([`linklevel`]);
//! - reproducible sweep experiments with CSV output ([`experiments`]).
//!
//! Every stochastic operation takes an explicit seed and the experiment
//! runner derives per-trial sub-seeds deterministically, so results are
//! byte-for-byte reproducible regardless of worker count.

pub mod bounds;
pub mod channel;
pub mod coupling;
pub mod estimators;
pub mod experiments;
pub mod geometry;
pub mod linklevel;
pub mod seeding;

/// Speed of light in vacuum [m/s].
pub const C0: f64 = 299_792_458.0;

/// Double-precision complex sample.
pub type C64 = num_complex::Complex<f64>;

pub use geometry::{Mat3, Vec3};
