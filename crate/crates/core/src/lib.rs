//! Pseudo-marginal MCMC for doubly-intractable posteriors.
//!
//! The likelihood of a doubly-intractable model, `p(y|theta) = f(y;theta) / Z(theta)`,
//! contains a parameter-dependent normalising constant `Z(theta)` that cannot be
//! computed. This crate samples from the exact posterior anyway by plugging an
//! *unbiased* (but possibly signed) estimate of the likelihood into a
//! Metropolis-Hastings chain run on the absolute measure, and correcting posterior
//! expectations with the recorded signs.
//!
//! The pieces, from the bottom up:
//!
//! * [`truncation`] — unbiased stochastic truncation of infinite series
//!   (Russian roulette and single-term weighted truncation).
//! * [`estimators`] — signed unbiased likelihood estimates built from i.i.d.
//!   unbiased draws of `Z(theta)`: a geometric-series correction and an
//!   exponential auxiliary-variable series, both truncated without bias.
//! * [`normalizers`] — unbiased positive estimators of `Z(theta)`: annealed
//!   importance sampling, a tempered SMC sampler, and plain importance sampling.
//! * [`pm_mcmc`] — the signed pseudo-marginal Metropolis-Hastings kernel,
//!   sign-corrected expectations and chain diagnostics.
//! * [`ising`] — Ising lattice backend with exact partition functions
//!   (brute force, transfer matrix), Gibbs and perfect (CFTP) samplers, and
//!   Exchange-algorithm baseline kernels.
//! * [`bingham`] — Fisher-Bingham distribution on the 2-sphere with a
//!   deterministic quadrature oracle.

pub mod bingham;
pub mod error;
pub mod estimators;
pub mod ising;
pub mod logspace;
pub mod normalizers;
pub mod pm_mcmc;
pub mod rngstream;
pub mod truncation;

pub use error::{Error, Result};
pub use logspace::SignedValue;
