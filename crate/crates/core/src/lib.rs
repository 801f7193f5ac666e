//! Mild-solution simulation of stochastic evolution equations
//!
//! ```text
//! du + Au dt = F(u) dt + B(u) dW
//! ```
//!
//! on the weighted space `L²(ℝ₊, e^{−αx} dx)`, where `A` generates the
//! translation semigroup. The crate provides the discrete function space,
//! the semigroup/resolvent/Yosida operators, superposition coefficients
//! (including the HJM no-arbitrage drift), counter-based noise, a splitting
//! solver for the mild formulation, and the diagnostics used to check
//! positivity of solutions: the smoothed negative-part energies, Itô
//! residuals, and the Brézis–Strauss and Jensen inequalities for the
//! resolvent.
//!
//! The HJM/Musiela forward-rate model in [`hjm`] is the main application;
//! [`experiment`] wires everything into a config-driven batch runner.

pub mod coefficients;
pub mod error;
pub mod experiment;
pub mod function_space;
pub mod hjm;
pub mod noise;
pub mod operators;
pub mod regularization;
pub mod solver;

mod quadrature;

pub use coefficients::{A3Report, CoefficientModel, CurveSampler, DriftKind, ModeFunction};
pub use error::{Error, Result};
pub use function_space::{Grid, GridFunction, LatticeParts, NormKind};
pub use noise::NoiseConfig;
pub use operators::{OperatorSuite, Resolvent};
pub use solver::{EnsembleSummary, PathResult, Scheme, Simulation, SolverConfig};
