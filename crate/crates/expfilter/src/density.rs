//! First-order correction of the conditional density.
//!
//! Around the Gaussian filter law `N(mu_t, gamma_t)`, the perturbation adds
//! a finite Hermite series at first order:
//!
//! ```text
//! p(x) = phi(x; mu, gamma) * (1 + eps * sum_{k>=1} c_k / (k! gamma^k)
//!                                       * H_k(x - mu; gamma))
//! ```
//!
//! with scaled Hermite polynomials `H_{k+1}(z) = z H_k(z) - k gamma
//! H_{k-1}(z)` and coefficients `c_k = E[H_k(X_t - mu_t; gamma_t) * F]`,
//! where `F` is the first perturbation integral. Expanding `H_k` reduces
//! `c_k` to centered endpoint moments of `F`, which are combinations of the
//! same iterated moment integrals the filter uses. For `g(x) = x^j` every
//! `c_k` with `k > j + 1` cancels symbolically, so the series is exactly
//! finite; the normalizing `c_0` cancels against the expansion of the
//! denominator and never appears.

use crate::aterm::poly::{Atom, Poly};
use crate::aterm::{derive_closure, ATermSystem, CompiledSystem, DEFAULT_CLOSURE_BUDGET};
use crate::error::{Error, Result};
use crate::filter::kalman_bucy;
use crate::sim::{ModelParams, SamplePath};
use crate::wick::{decompose_centered, ATermCombo, CompiledCombo};

/// Scaled (probabilist) Hermite polynomial `H_k(x; gamma)` by recurrence:
/// `H_0 = 1`, `H_1 = x`, `H_{k+1} = x H_k - k gamma H_{k-1}`.
pub fn hermite_scaled(k: usize, x: f64, gamma: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for m in 1..k {
                let next = x * cur - m as f64 * gamma * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

fn factorial(k: usize) -> i64 {
    (1..=k as i64).product()
}

/// Coefficient of `z^{k-2l}` in `H_k(z; gamma)` divided by `(-gamma)^l`:
/// `k! / (l! 2^l (k-2l)!)`.
fn hermite_monomial_coeff(k: usize, l: usize) -> i64 {
    factorial(k) / (factorial(l) * (1i64 << l) * factorial(k - 2 * l))
}

/// Symbolic Hermite coefficient `c_k` as a combination of moment integrals:
/// `c_k = sum_l (-gamma)^l k!/(l! 2^l (k-2l)!) M_{k-2l}` with `M_m` the
/// order-1 centered decomposition. Cancels to the empty combination for
/// `k > j + 1`.
pub fn hermite_coefficient_combo(k: usize, j: u8) -> Result<ATermCombo> {
    if k == 0 || k > 20 {
        return Err(Error::invalid("hermite index must lie in 1..=20"));
    }
    let mut combo = ATermCombo::empty();
    for l in 0..=(k / 2) {
        let sign = if l % 2 == 0 { 1 } else { -1 };
        let weight = Poly::atom_pow(Atom::Gamma, l as u8)
            .scale(sign * hermite_monomial_coeff(k, l));
        let m = decompose_centered((k - 2 * l) as u8, j, 1)?;
        combo = combo.add(&m.mul_poly(&weight));
    }
    Ok(combo)
}

/// Per-model machinery for density corrections at arbitrary times.
#[derive(Debug, Clone)]
pub struct DensityEngine {
    params: ModelParams,
    k_max: usize,
    system: ATermSystem,
    compiled: CompiledSystem,
    ck: Vec<CompiledCombo>,
}

impl DensityEngine {
    pub fn new(params: &ModelParams, k_max: usize) -> Result<Self> {
        params.validate_for_filtering()?;
        if k_max == 0 {
            return Err(Error::invalid("need at least one hermite coefficient"));
        }
        let j = u8::try_from(params.j)
            .map_err(|_| Error::invalid("perturbation exponent too large"))?;
        let combos: Vec<ATermCombo> = (1..=k_max)
            .map(|k| hermite_coefficient_combo(k, j))
            .collect::<Result<Vec<_>>>()?;
        let mut seeds = Vec::new();
        for combo in &combos {
            seeds.extend(combo.specs().cloned());
        }
        let system = derive_closure(&seeds, DEFAULT_CLOSURE_BUDGET)?;
        let compiled = system.compile(params.a, params.c, params.sigma);
        let ck = combos
            .iter()
            .map(|cb| cb.compile(&system, params.a, params.c, params.sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(DensityEngine { params: *params, k_max, system, compiled, ck })
    }

    pub fn system(&self) -> &ATermSystem {
        &self.system
    }

    /// Corrected density parameters at grid step `t_index`.
    pub fn run(&self, path: &SamplePath, t_index: usize) -> Result<DensityCorrection> {
        if t_index > path.grid.n_steps {
            return Err(Error::invalid("time index beyond the grid"));
        }
        let state = kalman_bucy(&self.params, path)?;
        if state.gamma[t_index] <= 0.0 {
            return Err(Error::invalid(
                "density correction needs positive filter variance; pick t > 0",
            ));
        }
        let dt = path.grid.dt;
        let mut integrator = self.compiled.integrator();
        for k in 0..t_index {
            integrator.step(k, state.mu[k], state.gamma[k], path.dy(k), dt)?;
        }
        let (mu, gamma) = (state.mu[t_index], state.gamma[t_index]);
        let mut c = vec![0.0; self.k_max + 1];
        for (k, combo) in self.ck.iter().enumerate() {
            c[k + 1] = combo.eval(mu, gamma, integrator.values());
        }
        Ok(DensityCorrection {
            t_index,
            mu,
            gamma,
            epsilon: self.params.epsilon,
            c,
        })
    }
}

/// Evaluated correction at one time: base Gaussian parameters plus the
/// Hermite coefficients. `c[0]` is identically zero (normalization).
#[derive(Debug, Clone)]
pub struct DensityCorrection {
    pub t_index: usize,
    pub mu: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub c: Vec<f64>,
}

impl DensityCorrection {
    /// Corrected density at `x`. Integrates to exactly one in the continuum:
    /// every Hermite term has zero Gaussian mean.
    pub fn eval(&self, x: f64) -> f64 {
        let z = x - self.mu;
        let phi = (-(z * z) / (2.0 * self.gamma)).exp()
            / (2.0 * std::f64::consts::PI * self.gamma).sqrt();
        let mut corr = 0.0;
        let mut scale = 1.0;
        for k in 1..self.c.len() {
            scale *= k as f64 * self.gamma;
            corr += self.c[k] / scale * hermite_scaled(k, z, self.gamma);
        }
        phi * (1.0 + self.epsilon * corr)
    }

    pub fn eval_grid(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }

    /// Evenly spaced grid covering `mu +- half_width * sqrt(gamma)`.
    pub fn default_grid(&self, half_width: f64, n_points: usize) -> Vec<f64> {
        let s = self.gamma.sqrt();
        let lo = self.mu - half_width * s;
        let hi = self.mu + half_width * s;
        linspace(lo, hi, n_points)
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + h * i as f64).collect()
}

/// Trapezoid rule on an evenly indexed sample of a function.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (y[0] + y[1]) * (x[1] - x[0]))
        .sum()
}

/// Interior local maxima at least `min_rel_height` of the global maximum,
/// reported as `x` locations in increasing order.
pub fn find_modes(xs: &[f64], ys: &[f64], min_rel_height: f64) -> Vec<f64> {
    let peak = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    for i in 1..ys.len().saturating_sub(1) {
        if ys[i] > ys[i - 1] && ys[i] > ys[i + 1] && ys[i] >= min_rel_height * peak {
            out.push(xs[i]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_recurrence_matches_explicit_polynomials() {
        for &(x, g) in &[(0.3, 0.7), (-1.2, 0.12), (2.0, 1.0)] {
            assert!((hermite_scaled(2, x, g) - (x * x - g)).abs() < 1e-12);
            assert!((hermite_scaled(3, x, g) - (x * x * x - 3.0 * g * x)).abs() < 1e-12);
            let h4 = x.powi(4) - 6.0 * g * x * x + 3.0 * g * g;
            assert!((hermite_scaled(4, x, g) - h4).abs() < 1e-12);
            let h5 = x.powi(5) - 10.0 * g * x.powi(3) + 15.0 * g * g * x;
            assert!((hermite_scaled(5, x, g) - h5).abs() < 1e-11);
        }
    }

    #[test]
    fn hermite_polynomials_are_orthogonal_under_the_gaussian() {
        let g: f64 = 0.37;
        let xs = linspace(-8.0 * g.sqrt(), 8.0 * g.sqrt(), 8001);
        for k in 0..=4usize {
            for l in 0..=4usize {
                let ys: Vec<f64> = xs
                    .iter()
                    .map(|&x| {
                        let phi = (-(x * x) / (2.0 * g)).exp()
                            / (2.0 * std::f64::consts::PI * g).sqrt();
                        phi * hermite_scaled(k, x, g) * hermite_scaled(l, x, g)
                    })
                    .collect();
                let got = trapezoid(&xs, &ys);
                let want =
                    if k == l { factorial(k) as f64 * g.powi(k as i32) } else { 0.0 };
                assert!(
                    (got - want).abs() < 1e-8,
                    "<H_{k}, H_{l}> = {got}, expected {want}"
                );
            }
        }
    }

    #[test]
    fn coefficients_above_degree_j_plus_one_cancel_symbolically() {
        for k in (3 + 2)..=8usize {
            let combo = hermite_coefficient_combo(k, 3).unwrap();
            assert!(
                combo.terms().is_empty(),
                "c_{k} should cancel, got {}",
                combo.listing()
            );
        }
        // and the boundary case does not cancel
        assert!(!hermite_coefficient_combo(4, 3).unwrap().terms().is_empty());
        for k in 3..=6usize {
            let combo = hermite_coefficient_combo(k, 1).unwrap();
            assert!(combo.terms().is_empty(), "linear case: c_{k} should cancel");
        }
    }

    #[test]
    fn unperturbed_density_is_the_gaussian_and_finds_one_mode() {
        let corr = DensityCorrection {
            t_index: 10,
            mu: 0.4,
            gamma: 0.09,
            epsilon: 0.0,
            c: vec![0.0; 5],
        };
        let xs = corr.default_grid(8.0, 2001);
        let ps = corr.eval_grid(&xs);
        let mass = trapezoid(&xs, &ps);
        assert!((mass - 1.0).abs() < 1e-9, "gaussian mass {mass}");
        let modes = find_modes(&xs, &ps, 0.05);
        assert_eq!(modes.len(), 1);
        assert!((modes[0] - 0.4).abs() < 2e-3);
    }

    #[test]
    fn corrected_density_keeps_unit_mass() {
        let corr = DensityCorrection {
            t_index: 10,
            mu: -0.2,
            gamma: 0.12,
            epsilon: 0.2,
            c: vec![0.0, 0.05, -0.02, 0.04, -0.01],
        };
        let xs = corr.default_grid(8.0, 4001);
        let ps = corr.eval_grid(&xs);
        let mass = trapezoid(&xs, &ps);
        assert!((mass - 1.0).abs() < 1e-7, "corrected mass {mass}");
    }
}
