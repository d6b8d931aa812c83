//! The expansion filter: a linear reference filter plus correction
//! coefficients of successive orders in the perturbation size.
//!
//! Order zero is the Kalman-Bucy filter for the unperturbed linear pair
//! `(X, Y)`. Higher orders divide two expansions term by term: with `Jx_m`
//! and `J1_m` the order-`m` perturbation integrals against `X_t` and `1`
//! (already carrying their `1/sigma^{2m}` scale), the coefficients satisfy
//!
//! ```text
//! N_0 = mu_t,    N_m = Jx_m - sum_{l=1}^{m} J1_l * N_{m-l},
//! ```
//!
//! and the filter estimate is `sum_m N_m epsilon^m`. Each `Jx_m`, `J1_m` is a
//! combination of iterated moment integrals evaluated by streaming their
//! closed Ito system along the observation path.

use crate::aterm::{derive_closure, ATermSystem, CompiledSystem, DEFAULT_CLOSURE_BUDGET};
use crate::error::{Error, Result};
use crate::sim::{ModelParams, SamplePath};
use crate::wick::{decompose_j_term, CompiledCombo};

/// Mean and variance trajectories of the linear (Kalman-Bucy) filter,
/// indexed like the grid (`len == n_steps + 1`).
#[derive(Debug, Clone)]
pub struct LinearFilterState {
    pub mu: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Deterministic filter variance: explicit Euler on the Riccati equation
/// `gamma' = b^2 + 2 a gamma - c_obs^2 gamma^2 / sigma^2`, `gamma(0) = 0`.
pub fn riccati_variance(params: &ModelParams, n_steps: usize, dt: f64, c_obs: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut g = 0.0;
    out.push(g);
    let is2 = 1.0 / (params.sigma * params.sigma);
    for _ in 0..n_steps {
        g += (params.b * params.b + 2.0 * params.a * g - c_obs * c_obs * g * g * is2) * dt;
        out.push(g);
    }
    out
}

/// Linear filter along a path, with the observation gain decoupled from the
/// true model gain so sensitivity studies can perturb it.
pub fn kalman_bucy_with_gain(
    params: &ModelParams,
    path: &SamplePath,
    c_obs: f64,
) -> Result<LinearFilterState> {
    params.validate_for_filtering()?;
    let n = path.grid.n_steps;
    let dt = path.grid.dt;
    let gamma = riccati_variance(params, n, dt, c_obs);
    let is2 = 1.0 / (params.sigma * params.sigma);
    let mut mu = Vec::with_capacity(n + 1);
    let mut m = 0.0;
    mu.push(m);
    for (k, &g) in gamma.iter().take(n).enumerate() {
        let innov = path.dy(k) - c_obs * m * dt;
        m += params.a * m * dt + c_obs * g * is2 * innov;
        if !m.is_finite() {
            return Err(Error::NonFinite { what: "filter mean".into(), step: k + 1 });
        }
        mu.push(m);
    }
    Ok(LinearFilterState { mu, gamma })
}

/// Linear filter with the model's own observation gain.
pub fn kalman_bucy(params: &ModelParams, path: &SamplePath) -> Result<LinearFilterState> {
    kalman_bucy_with_gain(params, path, params.c)
}

/// Correction coefficient trajectories: `coef[m][k]` is the order-`m`
/// coefficient at grid step `k`, with `coef[0]` the linear filter mean.
#[derive(Debug, Clone)]
pub struct ExpansionCoefficients {
    pub coef: Vec<Vec<f64>>,
    pub state: LinearFilterState,
}

impl ExpansionCoefficients {
    pub fn order(&self) -> usize {
        self.coef.len() - 1
    }
}

/// Reusable per-model machinery: the closed integral system and the compiled
/// combinations for every order. Building it once amortizes the symbolic
/// work across an ensemble of paths.
#[derive(Debug, Clone)]
pub struct ExpansionEngine {
    params: ModelParams,
    order: usize,
    system: ATermSystem,
    compiled: CompiledSystem,
    jx: Vec<CompiledCombo>,
    j1: Vec<CompiledCombo>,
}

impl ExpansionEngine {
    pub fn new(params: &ModelParams, order: usize) -> Result<Self> {
        params.validate_for_filtering()?;
        let j = u8::try_from(params.j)
            .map_err(|_| Error::invalid("perturbation exponent too large"))?;
        let mut seeds = Vec::new();
        let mut jx_combos = Vec::with_capacity(order);
        let mut j1_combos = Vec::with_capacity(order);
        for m in 1..=order {
            let cx = decompose_j_term(1, j, m)?;
            let c1 = decompose_j_term(0, j, m)?;
            seeds.extend(cx.specs().cloned());
            seeds.extend(c1.specs().cloned());
            jx_combos.push(cx);
            j1_combos.push(c1);
        }
        let system = derive_closure(&seeds, DEFAULT_CLOSURE_BUDGET)?;
        let compiled = system.compile(params.a, params.c, params.sigma);
        let jx = jx_combos
            .iter()
            .map(|cb| cb.compile(&system, params.a, params.c, params.sigma))
            .collect::<Result<Vec<_>>>()?;
        let j1 = j1_combos
            .iter()
            .map(|cb| cb.compile(&system, params.a, params.c, params.sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpansionEngine { params: *params, order, system, compiled, jx, j1 })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn system(&self) -> &ATermSystem {
        &self.system
    }

    /// One forward sweep: linear filter, then the integral system, reading
    /// off the coefficient recursion at every step.
    pub fn run(&self, path: &SamplePath) -> Result<ExpansionCoefficients> {
        let state = kalman_bucy(&self.params, path)?;
        let n = path.grid.n_steps;
        let dt = path.grid.dt;
        let mut coef = vec![vec![0.0; n + 1]; self.order + 1];
        coef[0].clone_from(&state.mu);

        let mut integrator = self.compiled.integrator();
        let mut jx_vals = vec![0.0; self.order + 1];
        let mut j1_vals = vec![0.0; self.order + 1];
        j1_vals[0] = 1.0;
        for (k, (&mu, &gamma)) in state.mu.iter().zip(&state.gamma).enumerate() {
            if k > 0 {
                integrator.step(k - 1, state.mu[k - 1], state.gamma[k - 1], path.dy(k - 1), dt)?;
            }
            let values = integrator.values();
            jx_vals[0] = mu;
            for m in 1..=self.order {
                jx_vals[m] = self.jx[m - 1].eval(mu, gamma, values);
                j1_vals[m] = self.j1[m - 1].eval(mu, gamma, values);
            }
            for m in 1..=self.order {
                let mut v = jx_vals[m];
                for l in 1..=m {
                    v -= j1_vals[l] * coef[m - l][k];
                }
                coef[m][k] = v;
            }
        }
        Ok(ExpansionCoefficients { coef, state })
    }
}

/// Convenience wrapper for a single path.
pub fn compute_coefficients(
    params: &ModelParams,
    path: &SamplePath,
    order: usize,
) -> Result<ExpansionCoefficients> {
    ExpansionEngine::new(params, order)?.run(path)
}

/// Sums the coefficient trajectories: `sum_m coef[m][k] epsilon^m`.
pub fn assemble(coef: &[Vec<f64>], epsilon: f64) -> Vec<f64> {
    let len = coef.first().map_or(0, Vec::len);
    let mut out = vec![0.0; len];
    let mut eps_pow = 1.0;
    for c in coef {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v * eps_pow;
        }
        eps_pow *= epsilon;
    }
    out
}

/// Caps each order's contribution at `r` times the magnitude of the previous
/// order's (already capped) contribution, preserving sign:
///
/// ```text
/// |clipped_m * eps^m| <= r * |clipped_{m-1} * eps^{m-1}|
/// ```
///
/// Order zero is never touched; `r = inf` disables clipping. A correction
/// that vanishes stays zero, and so do all orders above it.
pub fn clip_coefficients(coef: &[Vec<f64>], epsilon: f64, r: f64) -> Result<Vec<Vec<f64>>> {
    if r.is_nan() || r <= 0.0 {
        return Err(Error::invalid("clip ratio must be positive"));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(coef.len());
    out.push(coef.first().cloned().unwrap_or_default());
    if r.is_infinite() {
        out.extend(coef.iter().skip(1).cloned());
        return Ok(out);
    }
    let mut eps_pow = 1.0;
    for m in 1..coef.len() {
        let prev_pow = eps_pow;
        eps_pow *= epsilon;
        let prev = &out[m - 1];
        let row: Vec<f64> = coef[m]
            .iter()
            .zip(prev)
            .map(|(&v, &p)| {
                let cap = r * (p * prev_pow).abs();
                if (v * eps_pow).abs() <= cap {
                    v
                } else {
                    // here |v * eps_pow| > cap >= 0, so the division is safe
                    cap * v.signum() / eps_pow.abs()
                }
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_path, TimeGrid};

    fn params_linear() -> ModelParams {
        ModelParams::new(-0.4, 0.5, 1.0, 0.3, 0.2, 1).unwrap()
    }

    fn params_cubic() -> ModelParams {
        ModelParams::new(-0.4, 0.5, 1.0, 0.3, 0.2, 3).unwrap()
    }

    #[test]
    fn riccati_with_zero_gain_matches_closed_form() {
        let p = params_linear();
        let dt = 1e-4;
        let n = 20_000;
        let g = riccati_variance(&p, n, dt, 0.0);
        // no observations: plain OU variance b^2 (e^{2at} - 1) / (2a)
        for k in [1000usize, 10_000, 20_000] {
            let t = k as f64 * dt;
            let want = p.b * p.b * ((2.0 * p.a * t).exp() - 1.0) / (2.0 * p.a);
            assert!((g[k] - want).abs() < 1e-4, "step {k}: {} vs {want}", g[k]);
        }
    }

    #[test]
    fn riccati_approaches_stationary_point() {
        let p = params_cubic();
        let g = riccati_variance(&p, 10_000, 1e-3, p.c);
        // positive root of c^2 g^2 / sigma^2 - 2 a g - b^2 = 0
        let is2 = 1.0 / (p.sigma * p.sigma);
        let root = (p.a + (p.a * p.a + p.c * p.c * is2 * p.b * p.b).sqrt())
            / (p.c * p.c * is2);
        let last = *g.last().unwrap();
        assert!((last - root).abs() < 1e-8);
        assert!(g.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn zeroth_order_coefficient_is_the_linear_filter_mean() {
        let p = params_cubic();
        let grid = TimeGrid::new(2.0, 0.01).unwrap();
        let path = simulate_path(&p, &grid, 7).unwrap();
        let coeffs = compute_coefficients(&p, &path, 2).unwrap();
        let kb = kalman_bucy(&p, &path).unwrap();
        assert_eq!(coeffs.coef[0], kb.mu);
        assert_eq!(coeffs.order(), 2);
        for row in &coeffs.coef {
            assert!(row.iter().all(|v| v.is_finite()));
        }
        // corrections start at zero: the perturbation integrals are empty
        assert_eq!(coeffs.coef[1][0], 0.0);
        assert_eq!(coeffs.coef[2][0], 0.0);
    }

    #[test]
    fn assemble_is_a_plain_power_series() {
        let coef = vec![vec![1.0, 2.0], vec![10.0, 20.0], vec![100.0, 200.0]];
        let out = assemble(&coef, 0.1);
        assert!((out[0] - (1.0 + 1.0 + 1.0)).abs() < 1e-12);
        assert!((out[1] - (2.0 + 2.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping_enforces_the_cascade_bound() {
        let eps = 0.2;
        let r = 0.3;
        let coef = vec![
            vec![1.0, -2.0, 0.0, 1.0],
            vec![0.1, 100.0, 5.0, -0.2],
            vec![50.0, -0.5, 1.0, 0.0],
        ];
        let clipped = clip_coefficients(&coef, eps, r).unwrap();
        assert_eq!(clipped[0], coef[0]);
        for k in 0..coef[0].len() {
            for m in 1..=2 {
                let here = (clipped[m][k] * eps.powi(m as i32)).abs();
                let prev = (clipped[m - 1][k] * eps.powi(m as i32 - 1)).abs();
                assert!(here <= r * prev + 1e-15, "bound fails at m={m} k={k}");
                // sign is preserved when the cap bites
                if coef[m][k] != 0.0 {
                    assert!(clipped[m][k] * coef[m][k] >= 0.0);
                }
            }
        }
        // zero base: everything above is pinned to zero
        assert_eq!(clipped[1][2], 0.0);
        assert_eq!(clipped[2][2], 0.0);
    }

    #[test]
    fn infinite_ratio_disables_clipping() {
        let coef = vec![vec![1.0], vec![1e6], vec![-1e9]];
        let clipped = clip_coefficients(&coef, 0.2, f64::INFINITY).unwrap();
        assert_eq!(clipped, coef);
        assert!(clip_coefficients(&coef, 0.2, 0.0).is_err());
        assert!(clip_coefficients(&coef, 0.2, -1.0).is_err());
    }
}
