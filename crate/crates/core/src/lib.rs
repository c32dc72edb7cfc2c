//! Nonparametric conditional density estimation in the kernel conditional
//! exponential family.
//!
//! Each conditional `p(y | x) ∝ q0(y) exp T(x, y)` is fitted by regularized
//! score matching, which reduces to one symmetric positive-definite linear
//! system. Joint densities are assembled from per-variable conditionals along
//! a DAG, sampled ancestrally with Hamiltonian Monte Carlo, and normalized by
//! Monte Carlo estimates of the partition function.
//!
//! | module | contents |
//! |--------|----------|
//! | [`kernels`] | anisotropic Gaussian kernels and their mixed partials |
//! | [`score_fit`] | Gram system assembly, solve, evaluation of `T` |
//! | [`factorization`] | DAG specs and joint fits |
//! | [`sampling`] | HMC, ancestral sampling, the synthetic grid dataset |
//! | [`evaluation`] | partition estimates, log-likelihood, CV, Fisher divergence |
//! | [`data_io`] | CSV, standardization, splits, model archives |

#![allow(clippy::needless_range_loop)]

pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod factorization;
pub mod kernels;
pub mod rng;
pub mod sampling;
pub mod score_fit;

pub use error::{Error, ErrorKind, Result};
pub use kernels::{ConditioningKernel, DerivRequest, GaussianKernel};
pub use score_fit::{fit_factor, BaseDensity, FactorModel, GramSystem};
