//! Gaussian moment expansion and the reduction of perturbation integrals to
//! combinations of iterated moment integrals.
//!
//! Under the smoothing law of the linear system, the signal at any set of
//! times is jointly Gaussian. Expectations of polynomial integrands therefore
//! reduce, by Wick/Isserlis pairing, to polynomials in the smoothed means and
//! covariances. [`decompose_j_term`] applies this to the order-`n`
//! perturbation integral
//!
//! ```text
//! J_n(X_t^i) = E[ X_t^i * iterated integral over 0 < t_1 < ... < t_n < t of
//!                 prod_k X_{t_k}^j (dY_{t_k} - c X_{t_k} dt_k) ]
//! ```
//!
//! splitting each driver as `(dY - c mu ds) - c (X - mu) ds` and pairing the
//! centered factors, which lands exactly on the [`crate::aterm`] integral
//! family. The `1 / sigma^{2n}` scale that multiplies the order-`n` integral
//! in the filter expansion is folded into the combination here.

use std::collections::HashMap;

use crate::aterm::poly::{Atom, Poly};
use crate::aterm::{tri_index, tri_len, ATermSpec, ATermSystem};
use crate::error::{Error, Result};

fn binomial(n: u8, k: u8) -> i64 {
    if k > n {
        return 0;
    }
    let mut acc: i64 = 1;
    for i in 0..k as i64 {
        acc = acc * (n as i64 - i) / (i + 1);
    }
    acc
}

/// One monomial of a Gaussian moment: `coeff * prod mu_i^{mu_exp[i]} *
/// prod cov_{ij}^{cov_exp[tri(i,j)]}` (upper triangle, diagonal included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WickTerm {
    pub coeff: i64,
    pub mu_exp: Vec<u8>,
    pub cov_exp: Vec<u8>,
}

/// A Gaussian moment expanded over mean/covariance monomials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WickPolynomial {
    pub n_vars: usize,
    pub terms: Vec<WickTerm>,
}

impl WickPolynomial {
    pub fn eval(&self, means: &[f64], cov: &[f64]) -> f64 {
        assert_eq!(means.len(), self.n_vars);
        assert_eq!(cov.len(), tri_len(self.n_vars));
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.coeff as f64;
                for (i, &e) in t.mu_exp.iter().enumerate() {
                    v *= means[i].powi(e as i32);
                }
                for (idx, &e) in t.cov_exp.iter().enumerate() {
                    v *= cov[idx].powi(e as i32);
                }
                v
            })
            .sum()
    }
}

/// Central moment `E[prod Z_i^{e_i}]` of jointly Gaussian centered variables,
/// as integer combinations of covariance monomials. Uses the pairing
/// recursion `E[Z_a M] = sum_b e_b cov_ab E[M / Z_b]`.
pub fn central_moment_terms(exps: &[u8]) -> Vec<(i64, Vec<u8>)> {
    let n = exps.len();
    let mut memo: HashMap<Vec<u8>, Vec<(i64, Vec<u8>)>> = HashMap::new();
    fn rec(
        e: &[u8],
        n: usize,
        memo: &mut HashMap<Vec<u8>, Vec<(i64, Vec<u8>)>>,
    ) -> Vec<(i64, Vec<u8>)> {
        let total: u32 = e.iter().map(|&x| x as u32).sum();
        if total == 0 {
            return vec![(1, vec![0; tri_len(n)])];
        }
        if total % 2 == 1 {
            return Vec::new();
        }
        if let Some(hit) = memo.get(e) {
            return hit.clone();
        }
        let a = e.iter().position(|&x| x > 0).unwrap();
        let mut rest = e.to_vec();
        rest[a] -= 1;
        let mut acc: HashMap<Vec<u8>, i64> = HashMap::new();
        for b in 0..n {
            if rest[b] == 0 {
                continue;
            }
            let mult = rest[b] as i64;
            let mut inner = rest.clone();
            inner[b] -= 1;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for (k, cov) in rec(&inner, n, memo) {
                let mut cov = cov;
                cov[tri_index(n, lo, hi)] += 1;
                *acc.entry(cov).or_insert(0) += mult * k;
            }
        }
        let mut out: Vec<(i64, Vec<u8>)> =
            acc.into_iter().map(|(cov, k)| (k, cov)).collect();
        out.sort_by(|x, y| x.1.cmp(&y.1));
        memo.insert(e.to_vec(), out.clone());
        out
    }
    rec(exps, n, &mut memo)
}

/// Full moment `E[prod X_i^{k_i} * prod Z_i^{extra_i}]` with `X_i = mu_i +
/// Z_i`: binomial expansion over the non-centered powers, then Gaussian
/// pairing of the centered part.
pub fn isserlis_moment(full_exps: &[u8], centered_extra: &[u8]) -> WickPolynomial {
    assert_eq!(full_exps.len(), centered_extra.len());
    let n = full_exps.len();
    let mut terms: HashMap<(Vec<u8>, Vec<u8>), i64> = HashMap::new();
    let mut m = vec![0u8; n];
    loop {
        let mut coeff: i64 = 1;
        for i in 0..n {
            coeff *= binomial(full_exps[i], m[i]);
        }
        let mu_exp: Vec<u8> = (0..n).map(|i| full_exps[i] - m[i]).collect();
        let cexp: Vec<u8> = (0..n).map(|i| m[i] + centered_extra[i]).collect();
        for (k, cov) in central_moment_terms(&cexp) {
            *terms.entry((mu_exp.clone(), cov)).or_insert(0) += coeff * k;
        }
        // odometer over 0..=full_exps
        let mut i = 0;
        loop {
            if i == n {
                let mut out: Vec<WickTerm> = terms
                    .into_iter()
                    .filter(|&(_, k)| k != 0)
                    .map(|((mu_exp, cov_exp), coeff)| WickTerm { coeff, mu_exp, cov_exp })
                    .collect();
                out.sort_by(|x, y| (&x.mu_exp, &x.cov_exp).cmp(&(&y.mu_exp, &y.cov_exp)));
                return WickPolynomial { n_vars: n, terms: out };
            }
            if m[i] < full_exps[i] {
                m[i] += 1;
                break;
            }
            m[i] = 0;
            i += 1;
        }
    }
}

/// Linear combination of moment integrals with polynomial coefficients in
/// the model constants and the time-`t` filter state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ATermCombo {
    terms: Vec<(Poly, ATermSpec)>,
}

impl ATermCombo {
    pub fn new(terms: Vec<(Poly, ATermSpec)>) -> Self {
        let mut combo = ATermCombo { terms };
        combo.normalize();
        combo
    }

    pub fn empty() -> Self {
        ATermCombo { terms: Vec::new() }
    }

    fn normalize(&mut self) {
        self.terms.sort_by(|x, y| x.1.cmp(&y.1));
        let mut out: Vec<(Poly, ATermSpec)> = Vec::with_capacity(self.terms.len());
        for (coeff, spec) in self.terms.drain(..) {
            match out.last_mut() {
                Some((last, s)) if *s == spec => *last = last.add(&coeff),
                _ => out.push((coeff, spec)),
            }
        }
        out.retain(|(coeff, _)| !coeff.is_zero());
        self.terms = out;
    }

    pub fn terms(&self) -> &[(Poly, ATermSpec)] {
        &self.terms
    }

    pub fn specs(&self) -> impl Iterator<Item = &ATermSpec> {
        self.terms.iter().map(|(_, s)| s)
    }

    pub fn add(&self, other: &ATermCombo) -> ATermCombo {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        ATermCombo::new(terms)
    }

    pub fn sub(&self, other: &ATermCombo) -> ATermCombo {
        self.add(&other.mul_poly(&Poly::constant(-1)))
    }

    pub fn mul_poly(&self, p: &Poly) -> ATermCombo {
        ATermCombo::new(
            self.terms
                .iter()
                .map(|(coeff, spec)| (coeff.mul(p), spec.clone()))
                .collect(),
        )
    }

    /// Resolves every integral against a closed system and folds constants,
    /// leaving per-step evaluation over `(mu, gamma, values)`.
    pub fn compile(
        &self,
        system: &ATermSystem,
        a: f64,
        c: f64,
        sigma: f64,
    ) -> Result<CompiledCombo> {
        let inv_sigma_sq = 1.0 / (sigma * sigma);
        let mut terms = Vec::new();
        for (coeff, spec) in &self.terms {
            let idx = system.index_of(spec).ok_or_else(|| {
                Error::invalid(format!("combination references {spec} outside the system"))
            })? as u32;
            for &(k, em, eg) in &coeff.compile(a, c, inv_sigma_sq).terms {
                terms.push((k, em, eg, idx));
            }
        }
        Ok(CompiledCombo { terms })
    }

    pub fn listing(&self) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        self.terms
            .iter()
            .map(|(coeff, spec)| format!("[{coeff}] {spec}"))
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

/// Numeric form of an [`ATermCombo`].
#[derive(Debug, Clone)]
pub struct CompiledCombo {
    terms: Vec<(f64, u8, u8, u32)>,
}

impl CompiledCombo {
    #[inline]
    pub fn eval(&self, mu: f64, gamma: f64, values: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|&(k, em, eg, idx)| {
                k * mu.powi(em as i32) * gamma.powi(eg as i32) * values[idx as usize]
            })
            .sum()
    }
}

/// Decomposes `J_n(X_t^{outer_pow}) / sigma^{2n}` for perturbation `g(x) =
/// x^j` into moment integrals. `outer_pow = 0` gives the normalizing column,
/// `outer_pow = 1` the mean column.
pub fn decompose_j_term(outer_pow: u8, j: u8, n: usize) -> Result<ATermCombo> {
    decompose(outer_pow, false, j, n)
}

/// Same reduction with the endpoint factor centered: `E[(X_t - mu_t)^m ...]`.
/// Used to build density correction coefficients.
pub fn decompose_centered(outer_pow: u8, j: u8, n: usize) -> Result<ATermCombo> {
    decompose(outer_pow, true, j, n)
}

fn decompose(outer_pow: u8, outer_centered: bool, j: u8, n: usize) -> Result<ATermCombo> {
    if n == 0 {
        return Err(Error::invalid("perturbation order must be >= 1"));
    }
    if j == 0 {
        return Err(Error::invalid("perturbation exponent must be >= 1"));
    }
    let nv = n + 1; // variable 0 is the endpoint
    let is2n = Poly::atom_pow(Atom::InvSigmaSq, n as u8);
    let mut terms: Vec<(Poly, ATermSpec)> = Vec::new();
    for subset in 0..(1u32 << n) {
        // subset bit k-1 set: take the centered `-c Z ds` branch of driver k
        let size = subset.count_ones() as u8;
        let mut full = vec![0u8; nv];
        let mut extra = vec![0u8; nv];
        if outer_centered {
            extra[0] = outer_pow;
        } else {
            full[0] = outer_pow;
        }
        let mut alpha = vec![0u8; n];
        for k in 0..n {
            full[k + 1] = j;
            if subset & (1 << k) != 0 {
                extra[k + 1] = 1;
            } else {
                alpha[k] = 1;
            }
        }
        let sign = if size.is_multiple_of(2) { 1 } else { -1 };
        let branch = is2n
            .scale(sign)
            .mul(&Poly::atom_pow(Atom::C, size));
        let moment = isserlis_moment(&full, &extra);
        for wt in &moment.terms {
            let local = Poly::constant(wt.coeff)
                .mul(&Poly::atom_pow(Atom::Mu, wt.mu_exp[0]))
                .mul(&Poly::atom_pow(Atom::Gamma, wt.cov_exp[tri_index(nv, 0, 0)]));
            let p: Vec<u8> = (1..nv).map(|k| wt.mu_exp[k]).collect();
            let q: Vec<u8> = (1..nv).map(|k| wt.cov_exp[tri_index(nv, 0, k)]).collect();
            let mut r = vec![0u8; tri_len(n)];
            for k in 1..nv {
                for l in k..nv {
                    r[tri_index(n, k - 1, l - 1)] = wt.cov_exp[tri_index(nv, k, l)];
                }
            }
            let spec = ATermSpec::new(p, q, r, alpha.clone())?;
            terms.push((branch.mul(&local), spec));
        }
    }
    Ok(ATermCombo::new(terms))
}
