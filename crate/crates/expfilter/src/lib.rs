//! Asymptotic-expansion filtering for a linear diffusion observed through a
//! polynomially perturbed channel.
//!
//! The model is the scalar pair
//!
//! ```text
//! dX_t = a X_t dt + b dV_t,                      X_0 = 0,
//! dY_t = (c X_t + eps * X_t^j) dt + sigma dW_t,  Y_0 = 0,
//! ```
//!
//! with independent Brownian motions `V`, `W`. For `eps = 0` the optimal
//! filter is the Kalman-Bucy filter. For small `eps` the conditional mean
//! admits a power-series correction in `eps` whose coefficients are smoothed
//! Gaussian moments of iterated stochastic integrals. This crate:
//!
//! * simulates the model ([`sim`]),
//! * expands the correction coefficients into moment integrals via Wick
//!   calculus ([`wick`]),
//! * derives, symbolically, a closed system of SDEs satisfied by those
//!   integrals and integrates it along an observation path ([`aterm`]),
//! * assembles, clips, and evaluates the corrected filters ([`filter`]),
//! * expands the conditional density around its Gaussian part ([`density`]),
//! * provides particle-filter and exact-linear baselines for validation
//!   ([`baselines`]),
//! * and drives batch experiments with CSV output ([`harness`]).

pub mod aterm;
pub mod baselines;
pub mod density;
pub mod error;
pub mod filter;
pub mod harness;
pub mod sim;
pub mod wick;

pub use error::{Error, Result};
