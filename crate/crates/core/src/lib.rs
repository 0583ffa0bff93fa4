//! Random conductances on a periodic lattice: correctors, homogenized
//! coefficients, and the first-order expansion of the effective conductance
//! in the perturbation probability.
//!
//! The crate is organized bottom-up:
//!
//! * [`lattice`]: torus geometry, fields, and discrete difference operators;
//! * [`environment`]: coupled sampling of base and replacement conductances;
//! * [`solver`]: conjugate-gradient and direct solvers for μ - ∇*·A∇;
//! * [`corrector`]: corrector problems and single- and multi-edge defect
//!   expansions;
//! * [`homogenize`]: Monte Carlo and exact estimators for the homogenized
//!   coefficient and its derivative in the replacement probability.
//!
//! All randomness is counter-based: every drawn number is a pure function of
//! (seed, edge index, stream), so results are reproducible bit-for-bit
//! regardless of thread count or evaluation order.

pub mod corrector;
pub mod environment;
pub mod error;
pub mod homogenize;
pub mod lattice;
pub mod solver;

pub use error::Error;
