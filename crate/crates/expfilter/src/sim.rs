//! Euler-Maruyama simulation of the signal/observation pair
//!
//! ```text
//! dX_t = a X_t dt + b dV_t,                      X_0 = 0,
//! dY_t = (c X_t + eps * X_t^j) dt + sigma dW_t,  Y_0 = 0.
//! ```
//!
//! Paths are reproducible: every path is driven by two independent
//! counter-derived ChaCha streams (one for the signal noise, one for the
//! observation noise), both derived from a single `u64` seed. Ensembles
//! derive per-path seeds from `(base_seed, path_index)` with a splitmix
//! hash, so any path of an ensemble can be regenerated in isolation.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Coefficients of the signal/observation model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Signal drift rate (mean reversion when negative).
    pub a: f64,
    /// Signal diffusion coefficient, `b >= 0`.
    pub b: f64,
    /// Linear observation gain.
    pub c: f64,
    /// Observation noise level, `sigma >= 0`; filtering requires `sigma > 0`.
    pub sigma: f64,
    /// Size of the polynomial observation perturbation.
    pub epsilon: f64,
    /// Exponent of the perturbation `x^j`.
    pub j: u32,
}

impl ModelParams {
    pub fn new(a: f64, b: f64, c: f64, sigma: f64, epsilon: f64, j: u32) -> Result<Self> {
        let p = ModelParams { a, b, c, sigma, epsilon, j };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("sigma", self.sigma),
            ("epsilon", self.epsilon),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("model parameter {name} must be finite")));
            }
        }
        if self.b < 0.0 {
            return Err(Error::invalid("diffusion coefficient b must be >= 0"));
        }
        if self.sigma < 0.0 {
            return Err(Error::invalid("observation noise sigma must be >= 0"));
        }
        Ok(())
    }

    /// Checks the extra conditions filtering needs on top of simulation.
    pub fn validate_for_filtering(&self) -> Result<()> {
        self.validate()?;
        if self.sigma <= 0.0 {
            return Err(Error::invalid("filtering requires sigma > 0"));
        }
        if self.j == 0 {
            return Err(Error::invalid("perturbation exponent j must be >= 1 for filtering"));
        }
        Ok(())
    }

    /// Observation drift `h(x) = c x + eps x^j`.
    pub fn observation_drift(&self, x: f64) -> f64 {
        self.c * x + self.epsilon * x.powi(self.j as i32)
    }
}

/// Uniform time grid on `[0, t_end]` with `n_steps` steps of width `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_end: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    /// `n_steps` is inferred from `t_end / dt`, which must be an integer
    /// within a 1e-9 relative tolerance.
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end.is_finite() && dt.is_finite()) || t_end <= 0.0 || dt <= 0.0 {
            return Err(Error::invalid("time grid requires t_end > 0 and dt > 0"));
        }
        if dt > t_end {
            return Err(Error::invalid("time grid requires dt <= t_end"));
        }
        let n = (t_end / dt).round();
        if ((n * dt - t_end) / t_end).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "t_end = {t_end} is not an integer multiple of dt = {dt}"
            )));
        }
        Ok(TimeGrid { t_end, dt, n_steps: n as usize })
    }

    /// Number of grid points, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Grid index closest to time `t` (clamped to the grid).
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n_steps)
    }
}

/// One simulated trajectory of `(X, Y)` on a grid.
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub grid: TimeGrid,
    pub seed: u64,
    /// Signal samples `X_{t_k}`, `x[0] = 0`.
    pub x: Vec<f64>,
    /// Observation samples `Y_{t_k}`, `y[0] = 0`.
    pub y: Vec<f64>,
}

impl SamplePath {
    /// Observation increment `Y_{k+1} - Y_k`.
    pub fn dy(&self, k: usize) -> f64 {
        self.y[k + 1] - self.y[k]
    }
}

/// splitmix64 finalizer; decorrelates consecutive counters.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for path `index` of an ensemble rooted at `base_seed`.
pub fn path_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Independent generator for one of a seed's noise streams: the simulator
/// uses stream 0 for the signal and stream 1 for the observation noise;
/// reference estimators take further streams.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// Simulates one path by the Euler-Maruyama scheme.
pub fn simulate_path(params: &ModelParams, grid: &TimeGrid, seed: u64) -> Result<SamplePath> {
    params.validate()?;
    let n = grid.n_steps;
    let dt = grid.dt;
    let sq = dt.sqrt();
    let mut signal_rng = stream_rng(seed, 0);
    let mut obs_rng = stream_rng(seed, 1);

    let mut x = Vec::with_capacity(n + 1);
    let mut y = Vec::with_capacity(n + 1);
    x.push(0.0);
    y.push(0.0);
    for k in 0..n {
        let xk = x[k];
        let dv: f64 = StandardNormal.sample(&mut signal_rng);
        let dw: f64 = StandardNormal.sample(&mut obs_rng);
        let xn = xk + params.a * xk * dt + params.b * sq * dv;
        let yn = y[k] + params.observation_drift(xk) * dt + params.sigma * sq * dw;
        if !(xn.is_finite() && yn.is_finite()) {
            return Err(Error::NonFinite { what: "simulated path".into(), step: k + 1 });
        }
        x.push(xn);
        y.push(yn);
    }
    Ok(SamplePath { grid: *grid, seed, x, y })
}

/// Simulates `n_paths` independent paths in parallel. Path `i` uses
/// `path_seed(base_seed, i)`, so the result does not depend on scheduling.
pub fn simulate_ensemble(
    params: &ModelParams,
    grid: &TimeGrid,
    base_seed: u64,
    n_paths: usize,
) -> Result<Vec<SamplePath>> {
    if n_paths == 0 {
        return Err(Error::invalid("ensemble requires n_paths >= 1"));
    }
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| simulate_path(params, grid, path_seed(base_seed, i)))
        .collect()
}
