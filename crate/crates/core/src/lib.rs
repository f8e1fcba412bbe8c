//! Simulation and optimization toolkit for dual-polarized stacked intelligent
//! metasurface (DPSIM) holographic MIMO links.
//!
//! The crate covers the full chain of a point-to-point link:
//!
//! - [`config`]: system and algorithm parameters, plain-text config files.
//! - [`geometry`]: metasurface layer grids and Rayleigh-Sommerfeld
//!   inter-layer diffraction matrices.
//! - [`channel`]: dual-polarized, spatially correlated Rayleigh channels with
//!   log-distance path loss and the truncated-SVD target.
//! - [`stack`]: trainable phase configurations and the transfer matrices of the
//!   transmit and receive stacks.
//! - [`optimizer`]: layer-by-layer gradient descent on the phases with a
//!   least-squares scaling factor.
//! - [`metrics`]: water-filling power allocation, NMSE, spectral and energy
//!   efficiency.
//! - [`harness`]: seeded Monte Carlo experiment campaigns and result files.

#![allow(clippy::needless_range_loop)]

pub mod channel;
pub mod config;
pub mod dump;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod optimizer;
pub mod stack;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dense real matrix.
pub type RMatrix = nalgebra::DMatrix<f64>;
