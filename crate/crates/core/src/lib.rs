//! Monte Carlo simulator for spectrally truncated stochastic evolution
//! equations driven by Wiener noise and a compensated Poisson random
//! measure, together with a pathwise sensitivity engine of arbitrary
//! order and estimators for the functional norms used to certify the
//! solution map's regularity.
//!
//! The state equation
//!
//! ```text
//! du + A u dt = f(t,u) dt + B(t,u) dW + ∫_Z G(t,z,u_-) (μ - ν)(dt,dz)
//! ```
//!
//! is discretised with an exponential Euler scheme on a jump-adapted
//! grid, so the semigroup part is exact and jump locations carry no
//! discretisation bias.  Sensitivity paths of order `n` solve the linear
//! variational systems obtained by differentiating the scheme itself;
//! the chain-rule corrections are assembled by exhaustive set-partition
//! enumeration, which makes the discrete sensitivities the *exact*
//! derivatives of the discrete flow.  That exactness is what the test
//! drivers in [`verify`] rely on.
//!
//! Module map:
//! - [`spectral`]: the diagonal operator `A`, its contraction semigroup
//!   and truncated state vectors.
//! - [`noise`]: reproducible per-path noise (Wiener increments plus
//!   marked jump events) on a jump-adapted grid.
//! - [`coefficients`]: built-in coefficient sets with multilinear
//!   derivatives up to a configured order.
//! - [`faadibruno`]: set partitions and chain-rule correction terms.
//! - [`solver`]: the exponential Euler stepper for the state equation
//!   and the variational systems.
//! - [`norms`]: Monte Carlo estimators of the path-space norms.
//! - [`verify`]: executable differentiability and well-posedness checks.
//! - [`config`]: the flat key-value run configuration format.

pub mod config;
pub mod coefficients;
pub mod faadibruno;
pub mod linalg;
pub mod noise;
pub mod norms;
pub mod solver;
pub mod spectral;
pub mod verify;

pub use linalg::Matrix;
pub use spectral::{SpectralOperator, StateVector};
