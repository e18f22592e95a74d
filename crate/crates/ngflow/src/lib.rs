//! Natural gradient flow training of small ResNet-style networks in a
//! configurable ambient Hilbert space, with adaptive network expansion.
//!
//! The crate is organized around a handful of pieces:
//!
//! - [`linalg`]: dense symmetric solves, Jacobi eigendecomposition, least squares
//! - [`network`]: ResNet blocks, exact parameter Jacobians, structural expansion
//! - [`hilbert`]: quadrature rules and the ambient inner products (discrete L2, H1 seminorm)
//! - [`energy`]: supervised L2 risk and the 1D Ritz energy, flow-matrix assembly
//! - [`optimizers`]: the regularized natural-gradient step with Armijo backtracking,
//!   an Adam baseline, stopping rules, and tangent-alignment diagnostics
//! - [`expansion`]: saturation-triggered layer insertion with random or
//!   gradient-aligned initialization of the new parameters
//! - [`problems`]: the bundled experiment problems (oscillatory regression,
//!   Poisson via Ritz energy, Burgers snapshot regression)
//!
//! Core math is generic over the scalar type ([`Scalar`]); the experiment
//! suite runs everything in `f64` via the aliases below.

pub mod energy;
pub mod expansion;
pub mod hilbert;
pub mod linalg;
pub mod network;
pub mod optimizers;
pub mod problems;
pub mod scalar;

pub use scalar::Scalar;

/// `f64` instantiations used by the experiment suite and the CLI.
pub type SymMatrix64 = linalg::SymMatrix<f64>;
pub type EigenDecomp64 = linalg::EigenDecomp<f64>;
pub type NetworkParams64 = network::NetworkParams<f64>;
pub type QuadratureRule64 = hilbert::QuadratureRule<f64>;
pub type EnergySpec64 = energy::EnergySpec<f64>;
pub type TrainRecord64 = optimizers::TrainRecord<f64>;
