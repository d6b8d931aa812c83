//! Symbolic engine for the iterated moment integrals that drive the
//! expansion filter.
//!
//! An [`ATermSpec`] names one integral of order `n`:
//!
//! ```text
//! A(p, q, r, alpha; n) = integral over 0 < t_1 < ... < t_n < t of
//!     prod_i  mu(t_i)^p_i                 (smoothed means)
//!     prod_i  gamma(t_i, t)^q_i           (covariances with the endpoint)
//!     prod_{i<=j} gamma(t_i, t_j)^r_ij    (interior covariances)
//!     d lambda(t_1) ... d lambda(t_n)
//! ```
//!
//! where each driver `d lambda(t_k)` is plain `ds` (`alpha_k = 0`) or the
//! compensated observation increment `dY - c mu ds` (`alpha_k = 1`), and all
//! smoothing statistics are conditioned on data up to the running time `t`.
//!
//! Differentiating such an integral in `t` yields a finite combination of
//! integrals of the same or lower order, so any starting set closes into a
//! finite system of Ito equations ([`derive_closure`]). The closed system is
//! then compiled against fixed model constants and integrated along an
//! observation path in one forward sweep ([`CompiledSystem`],
//! [`StreamingIntegrator`]).

pub mod poly;

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use poly::{Atom, CompiledPoly, Poly};

pub const DEFAULT_CLOSURE_BUDGET: usize = 10_000;

/// Row-major index into the upper triangle (diagonal included) of an
/// `n x n` symmetric layout.
#[inline]
pub fn tri_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * (2 * n - i + 1) / 2 + (j - i)
}

pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Exponent pattern of one iterated moment integral. See the module docs for
/// the meaning of `p`, `q`, `r`, and `alpha`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ATermSpec {
    n: usize,
    p: Vec<u8>,
    q: Vec<u8>,
    r: Vec<u8>,
    alpha: Vec<u8>,
}

impl ATermSpec {
    pub fn new(p: Vec<u8>, q: Vec<u8>, r: Vec<u8>, alpha: Vec<u8>) -> Result<Self> {
        let n = p.len();
        if n == 0 {
            return Err(Error::invalid("moment integral needs order >= 1"));
        }
        if q.len() != n || alpha.len() != n {
            return Err(Error::invalid("p, q, alpha must share one length"));
        }
        if r.len() != tri_len(n) {
            return Err(Error::invalid(format!(
                "r must hold the upper triangle: expected {} entries, got {}",
                tri_len(n),
                r.len()
            )));
        }
        if alpha.iter().any(|&x| x > 1) {
            return Err(Error::invalid("alpha entries must be 0 or 1"));
        }
        Ok(ATermSpec { n, p, q, r, alpha })
    }

    /// Order-1 shorthand: `A(p, q, r, alpha; 1)`.
    pub fn scalar(p: u8, q: u8, r: u8, alpha: u8) -> Result<Self> {
        ATermSpec::new(vec![p], vec![q], vec![r], vec![alpha])
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> &[u8] {
        &self.p
    }

    pub fn q(&self) -> &[u8] {
        &self.q
    }

    pub fn alpha(&self) -> &[u8] {
        &self.alpha
    }

    pub fn r_at(&self, i: usize, j: usize) -> u8 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.r[tri_index(self.n, i, j)]
    }

    /// Degree measure that is conserved by every same-order derivative term
    /// and certifies termination of closure discovery: interior covariances
    /// count twice because resolving one spends two endpoint slots.
    pub fn weighted_degree(&self) -> usize {
        let p: usize = self.p.iter().map(|&x| x as usize).sum();
        let q: usize = self.q.iter().map(|&x| x as usize).sum();
        let r: usize = self.r.iter().map(|&x| x as usize).sum();
        let act: usize = self.alpha.iter().filter(|&&x| x == 1).count();
        p + q + 2 * r + act
    }

    /// Drops the outermost variable: `r` entries pairing an inner variable
    /// with the last one become endpoint pairings of the reduced integral.
    /// Returns `None` for order 1 (reduction hits the constant 1).
    fn boundary_reduced(&self) -> Option<ATermSpec> {
        let n = self.n;
        if n == 1 {
            return None;
        }
        let m = n - 1;
        let p = self.p[..m].to_vec();
        let mut q = self.q[..m].to_vec();
        for (i, qi) in q.iter_mut().enumerate() {
            *qi += self.r[tri_index(n, i, m)];
        }
        let mut r = vec![0u8; tri_len(m)];
        for i in 0..m {
            for j in i..m {
                r[tri_index(m, i, j)] = self.r[tri_index(n, i, j)];
            }
        }
        let alpha = self.alpha[..m].to_vec();
        Some(ATermSpec { n: m, p, q, r, alpha })
    }
}

impl fmt::Display for ATermSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn list(xs: &[u8]) -> String {
            let s: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
            format!("[{}]", s.join(","))
        }
        if self.n == 1 {
            write!(f, "A({},{},{},{};1)", self.p[0], self.q[0], self.r[0], self.alpha[0])
        } else {
            write!(
                f,
                "A({},{},{},{};{})",
                list(&self.p),
                list(&self.q),
                list(&self.r),
                list(&self.alpha),
                self.n
            )
        }
    }
}

/// What a derivative term multiplies: the constant 1 or another integral.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Unit,
    Spec(ATermSpec),
}

/// Time differential a derivative term is attached to. `Innovation` is
/// `dI = dY - c mu dt`, with quadratic variation `sigma^2 dt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Driver {
    Dt,
    Innovation,
}

/// One right-hand-side term `coeff * target * driver` of an Ito equation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RhsTerm {
    pub coeff: Poly,
    pub target: Target,
    pub driver: Driver,
}

/// Ito differential of one moment integral, as a collected list of terms.
///
/// The rules below come from differentiating the definition in `t`:
/// the simplex boundary (outermost variable hitting `t`), the response of
/// every smoothing statistic to new data, and the quadratic covariations
/// among innovation-driven pieces.
pub fn differentiate(spec: &ATermSpec) -> Vec<RhsTerm> {
    let n = spec.order();
    let mut raw: Vec<RhsTerm> = Vec::new();

    let c = Poly::atom(Atom::C);
    let is2 = Poly::atom(Atom::InvSigmaSq);
    let c_is2 = c.mul(&is2);
    let c2_is2 = Poly::atom_pow(Atom::C, 2).mul(&is2);
    let c3_is2 = Poly::atom_pow(Atom::C, 3).mul(&is2);
    let c4_is2 = Poly::atom_pow(Atom::C, 4).mul(&is2);

    // Boundary: the outermost variable reaches t, where mu(t;t) is the filter
    // mean and every endpoint pairing collapses to the filter variance.
    let pn = spec.p[n - 1];
    let gn = spec.q[n - 1] + spec.r_at(n - 1, n - 1);
    let prefactor = Poly::atom_pow(Atom::Mu, pn).mul(&Poly::atom_pow(Atom::Gamma, gn));
    let reduced = spec.boundary_reduced();
    let boundary_target = match &reduced {
        None => Target::Unit,
        Some(s) => Target::Spec(s.clone()),
    };
    let boundary_driver =
        if spec.alpha[n - 1] == 1 { Driver::Innovation } else { Driver::Dt };
    raw.push(RhsTerm {
        coeff: prefactor.clone(),
        target: boundary_target.clone(),
        driver: boundary_driver,
    });

    if spec.alpha[n - 1] == 1 {
        // The boundary integrand is itself a semimartingale; its covariation
        // with the innovation driver leaves dt terms behind.
        if pn >= 1 {
            let coeff = c
                .scale(pn as i64)
                .mul(&Poly::atom_pow(Atom::Mu, pn - 1))
                .mul(&Poly::atom_pow(Atom::Gamma, gn + 1));
            raw.push(RhsTerm { coeff, target: boundary_target.clone(), driver: Driver::Dt });
        }
        if let Some(rspec) = &reduced {
            for i in 0..n - 1 {
                if rspec.p[i] >= 1 {
                    let mut t = rspec.clone();
                    t.p[i] -= 1;
                    t.q[i] += 1;
                    raw.push(RhsTerm {
                        coeff: c.scale(rspec.p[i] as i64).mul(&prefactor),
                        target: Target::Spec(t),
                        driver: Driver::Dt,
                    });
                }
                if rspec.alpha[i] == 1 {
                    let mut t = rspec.clone();
                    t.q[i] += 1;
                    t.alpha[i] = 0;
                    // No 1/sigma^2 here: one power cancels against the
                    // sigma^2 of the covariation.
                    raw.push(RhsTerm {
                        coeff: Poly::atom_pow(Atom::C, 2).neg().mul(&prefactor),
                        target: Target::Spec(t),
                        driver: Driver::Dt,
                    });
                }
            }
        }
    }

    // Smoothed means respond to new data through the gain c gamma(s,t)/sigma^2.
    for i in 0..n {
        if spec.p[i] >= 1 {
            let mut t = spec.clone();
            t.p[i] -= 1;
            t.q[i] += 1;
            raw.push(RhsTerm {
                coeff: c_is2.scale(spec.p[i] as i64),
                target: Target::Spec(t),
                driver: Driver::Innovation,
            });
        }
    }

    // Compensated drivers shift with the smoothed mean update, which swaps an
    // active driver for an endpoint covariance.
    for k in 0..n {
        if spec.alpha[k] == 1 {
            let mut t = spec.clone();
            t.q[k] += 1;
            t.alpha[k] = 0;
            raw.push(RhsTerm {
                coeff: c2_is2.neg(),
                target: Target::Spec(t),
                driver: Driver::Innovation,
            });
        }
    }

    // Every endpoint covariance decays at the closed-loop rate
    // kappa(t) = a - c^2 gamma(t) / sigma^2.
    let total_q: i64 = spec.q.iter().map(|&x| x as i64).sum();
    if total_q > 0 {
        let kappa =
            Poly::atom(Atom::A).sub(&c2_is2.mul(&Poly::atom(Atom::Gamma)));
        raw.push(RhsTerm {
            coeff: kappa.scale(total_q),
            target: Target::Spec(spec.clone()),
            driver: Driver::Dt,
        });
    }

    // Interior covariances contract through the endpoint:
    // d gamma(s,u;t) = -(c^2/sigma^2) gamma(s,t;t) gamma(u,t;t) dt.
    for i in 0..n {
        for j in i..n {
            let rij = spec.r[tri_index(n, i, j)];
            if rij >= 1 {
                let mut t = spec.clone();
                t.r[tri_index(n, i, j)] -= 1;
                t.q[i] += 1;
                t.q[j] += 1;
                raw.push(RhsTerm {
                    coeff: c2_is2.neg().scale(rij as i64),
                    target: Target::Spec(t),
                    driver: Driver::Dt,
                });
            }
        }
    }

    // Quadratic covariations among innovation-driven pieces (mean updates and
    // compensator shifts), each pair contributing sigma^2 dt.
    for i in 0..n {
        for j in (i + 1)..n {
            if spec.p[i] >= 1 && spec.p[j] >= 1 {
                let mut t = spec.clone();
                t.p[i] -= 1;
                t.p[j] -= 1;
                t.q[i] += 1;
                t.q[j] += 1;
                raw.push(RhsTerm {
                    coeff: c2_is2.scale(spec.p[i] as i64 * spec.p[j] as i64),
                    target: Target::Spec(t),
                    driver: Driver::Dt,
                });
            }
        }
        if spec.p[i] >= 2 {
            let mut t = spec.clone();
            t.p[i] -= 2;
            t.q[i] += 2;
            let pairs = spec.p[i] as i64 * (spec.p[i] as i64 - 1) / 2;
            raw.push(RhsTerm {
                coeff: c2_is2.scale(pairs),
                target: Target::Spec(t),
                driver: Driver::Dt,
            });
        }
    }
    for i in 0..n {
        if spec.p[i] == 0 {
            continue;
        }
        for k in 0..n {
            if spec.alpha[k] == 1 {
                let mut t = spec.clone();
                t.p[i] -= 1;
                t.q[i] += 1;
                t.q[k] += 1;
                t.alpha[k] = 0;
                raw.push(RhsTerm {
                    coeff: c3_is2.neg().scale(spec.p[i] as i64),
                    target: Target::Spec(t),
                    driver: Driver::Dt,
                });
            }
        }
    }
    for k in 0..n {
        for l in (k + 1)..n {
            if spec.alpha[k] == 1 && spec.alpha[l] == 1 {
                let mut t = spec.clone();
                t.q[k] += 1;
                t.q[l] += 1;
                t.alpha[k] = 0;
                t.alpha[l] = 0;
                raw.push(RhsTerm {
                    coeff: c4_is2.clone(),
                    target: Target::Spec(t),
                    driver: Driver::Dt,
                });
            }
        }
    }

    collect(raw)
}

/// Merges terms sharing (target, driver), drops cancellations, and returns a
/// canonically ordered list.
fn collect(raw: Vec<RhsTerm>) -> Vec<RhsTerm> {
    let mut map: BTreeMap<(Target, Driver), Poly> = BTreeMap::new();
    for term in raw {
        let entry = map.entry((term.target, term.driver)).or_insert_with(Poly::zero);
        *entry = entry.add(&term.coeff);
    }
    map.into_iter()
        .filter(|(_, coeff)| !coeff.is_zero())
        .map(|((target, driver), coeff)| RhsTerm { coeff, target, driver })
        .collect()
}

/// A finite closed system of Ito equations, one per discovered integral.
/// Seeds come first, followed by integrals in discovery order.
#[derive(Debug, Clone)]
pub struct ATermSystem {
    specs: Vec<ATermSpec>,
    equations: Vec<Vec<RhsTerm>>,
    index: HashMap<ATermSpec, usize>,
}

/// Breadth-first closure: differentiate every reachable integral until no new
/// ones appear, failing if more than `budget` are discovered.
pub fn derive_closure(seeds: &[ATermSpec], budget: usize) -> Result<ATermSystem> {
    let mut specs: Vec<ATermSpec> = Vec::new();
    let mut index: HashMap<ATermSpec, usize> = HashMap::new();
    let push = |spec: &ATermSpec,
                    specs: &mut Vec<ATermSpec>,
                    index: &mut HashMap<ATermSpec, usize>|
     -> Result<()> {
        if !index.contains_key(spec) {
            if specs.len() >= budget {
                return Err(Error::BudgetExceeded {
                    budget,
                    discovered: specs.len() + 1,
                });
            }
            index.insert(spec.clone(), specs.len());
            specs.push(spec.clone());
        }
        Ok(())
    };

    for seed in seeds {
        push(seed, &mut specs, &mut index)?;
    }
    let mut equations: Vec<Vec<RhsTerm>> = Vec::new();
    let mut cursor = 0;
    while cursor < specs.len() {
        let eq = differentiate(&specs[cursor].clone());
        for term in &eq {
            if let Target::Spec(s) = &term.target {
                push(s, &mut specs, &mut index)?;
            }
        }
        equations.push(eq);
        cursor += 1;
    }
    Ok(ATermSystem { specs, equations, index })
}

impl ATermSystem {
    pub fn specs(&self) -> &[ATermSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, spec: &ATermSpec) -> Option<usize> {
        self.index.get(spec).copied()
    }

    pub fn equation(&self, idx: usize) -> &[RhsTerm] {
        &self.equations[idx]
    }

    pub fn equations(&self) -> &[Vec<RhsTerm>] {
        &self.equations
    }

    /// Human-readable listing, one equation per line.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for (spec, eq) in self.specs.iter().zip(&self.equations) {
            out.push_str(&format!("d{spec} ="));
            for (i, term) in eq.iter().enumerate() {
                if i > 0 {
                    out.push_str(" +");
                }
                out.push_str(&format!(" [{}]", term.coeff));
                if let Target::Spec(s) = &term.target {
                    out.push_str(&format!(" {s}"));
                }
                out.push_str(match term.driver {
                    Driver::Dt => " dt",
                    Driver::Innovation => " dI",
                });
            }
            out.push('\n');
        }
        out
    }

    /// Folds model constants into every coefficient, producing the form
    /// used for numeric integration.
    pub fn compile(&self, a: f64, c: f64, sigma: f64) -> CompiledSystem {
        let inv_sigma_sq = 1.0 / (sigma * sigma);
        let mut max_mu = 0usize;
        let mut max_gamma = 0usize;
        let eqs: Vec<CompiledEquation> = self
            .equations
            .iter()
            .map(|eq| {
                let mut dt_terms = Vec::new();
                let mut di_terms = Vec::new();
                for term in eq {
                    let (pm, pg) = term.coeff.max_state_pows();
                    max_mu = max_mu.max(pm as usize);
                    max_gamma = max_gamma.max(pg as usize);
                    let compiled = CompiledTerm {
                        poly: term.coeff.compile(a, c, inv_sigma_sq),
                        target: match &term.target {
                            Target::Unit => None,
                            Target::Spec(s) => Some(self.index[s] as u32),
                        },
                    };
                    match term.driver {
                        Driver::Dt => dt_terms.push(compiled),
                        Driver::Innovation => di_terms.push(compiled),
                    }
                }
                CompiledEquation { dt_terms, di_terms }
            })
            .collect();
        CompiledSystem { c, eqs, max_mu, max_gamma }
    }
}

#[derive(Debug, Clone)]
struct CompiledTerm {
    poly: CompiledPoly,
    target: Option<u32>,
}

#[derive(Debug, Clone)]
struct CompiledEquation {
    dt_terms: Vec<CompiledTerm>,
    di_terms: Vec<CompiledTerm>,
}

/// Per-run compiled system: coefficients are monomials in the current filter
/// mean and variance only.
#[derive(Debug, Clone)]
pub struct CompiledSystem {
    c: f64,
    eqs: Vec<CompiledEquation>,
    max_mu: usize,
    max_gamma: usize,
}

impl CompiledSystem {
    pub fn len(&self) -> usize {
        self.eqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eqs.is_empty()
    }

    pub fn integrator(&self) -> StreamingIntegrator<'_> {
        StreamingIntegrator {
            sys: self,
            values: vec![0.0; self.eqs.len()],
            next: vec![0.0; self.eqs.len()],
            mu_pows: vec![1.0; self.max_mu + 1],
            gamma_pows: vec![1.0; self.max_gamma + 1],
        }
    }
}

/// Explicit one-step integrator over an observation path. All integrals start
/// at zero (empty simplex). Each step uses left-point values, matching the
/// Ito integrals being approximated.
#[derive(Debug, Clone)]
pub struct StreamingIntegrator<'a> {
    sys: &'a CompiledSystem,
    values: Vec<f64>,
    next: Vec<f64>,
    mu_pows: Vec<f64>,
    gamma_pows: Vec<f64>,
}

impl StreamingIntegrator<'_> {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Advances from step `k` to `k + 1` given the filter state and the
    /// observation increment over `[t_k, t_k + dt]`.
    pub fn step(&mut self, k: usize, mu: f64, gamma: f64, dy: f64, dt: f64) -> Result<()> {
        for e in 1..self.mu_pows.len() {
            self.mu_pows[e] = self.mu_pows[e - 1] * mu;
        }
        for e in 1..self.gamma_pows.len() {
            self.gamma_pows[e] = self.gamma_pows[e - 1] * gamma;
        }
        let d_innov = dy - self.sys.c * mu * dt;
        for (idx, eq) in self.sys.eqs.iter().enumerate() {
            let mut drift = 0.0;
            for term in &eq.dt_terms {
                let tval = match term.target {
                    None => 1.0,
                    Some(t) => self.values[t as usize],
                };
                drift += term.poly.eval(&self.mu_pows, &self.gamma_pows) * tval;
            }
            let mut diffusion = 0.0;
            for term in &eq.di_terms {
                let tval = match term.target {
                    None => 1.0,
                    Some(t) => self.values[t as usize],
                };
                diffusion += term.poly.eval(&self.mu_pows, &self.gamma_pows) * tval;
            }
            let v = self.values[idx] + drift * dt + diffusion * d_innov;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "moment integral value".into(),
                    step: k + 1,
                });
            }
            self.next[idx] = v;
        }
        std::mem::swap(&mut self.values, &mut self.next);
        Ok(())
    }
}

/// Integrates every equation along a path, returning full trajectories
/// `[integral][step]` (`len == n_steps + 1`). Intended for tests and small
/// runs; the filter itself streams.
pub fn integrate_full(
    sys: &CompiledSystem,
    mu: &[f64],
    gamma: &[f64],
    dy: &[f64],
    dt: f64,
) -> Result<Vec<Vec<f64>>> {
    if mu.len() != dy.len() + 1 || gamma.len() != dy.len() + 1 {
        return Err(Error::invalid(
            "state arrays must be one longer than the increment array",
        ));
    }
    let mut out = vec![vec![0.0; mu.len()]; sys.len()];
    let mut integrator = sys.integrator();
    for k in 0..dy.len() {
        integrator.step(k, mu[k], gamma[k], dy[k], dt)?;
        for (traj, &v) in out.iter_mut().zip(integrator.values()) {
            traj[k + 1] = v;
        }
    }
    Ok(out)
}
