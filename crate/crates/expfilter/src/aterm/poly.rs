//! Integer-coefficient polynomials in the five scalars that appear in the
//! coefficients of the moment-integral equations:
//!
//! * `a`    - signal drift rate (constant per run),
//! * `c`    - linear observation gain (constant per run),
//! * `is2`  - `1 / sigma^2` (constant per run),
//! * `mu`   - current filter mean `mu_t` (time-varying),
//! * `gam`  - current filter variance `gamma_t` (time-varying).
//!
//! All symbolic derivation steps produce integer combinations of these, so
//! exact arithmetic keeps term collection and structural comparison free of
//! rounding artifacts. Compilation folds the per-run constants into `f64`
//! factors, leaving only `mu`/`gam` powers to evaluate per time step.

use std::fmt;

/// One of the five coefficient scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Atom {
    A,
    C,
    InvSigmaSq,
    Mu,
    Gamma,
}

/// `k * a^ea * c^ec * is2^es * mu^em * gam^eg`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial {
    pub ea: u8,
    pub ec: u8,
    pub es: u8,
    pub em: u8,
    pub eg: u8,
    pub k: i64,
}

impl Monomial {
    fn key(&self) -> (u8, u8, u8, u8, u8) {
        (self.ea, self.ec, self.es, self.em, self.eg)
    }

    fn mul(&self, other: &Monomial) -> Monomial {
        Monomial {
            ea: self.ea + other.ea,
            ec: self.ec + other.ec,
            es: self.es + other.es,
            em: self.em + other.em,
            eg: self.eg + other.eg,
            k: self.k.checked_mul(other.k).expect("coefficient overflow"),
        }
    }
}

/// Sparse polynomial; terms are kept sorted by exponent key and merged.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Poly {
    terms: Vec<Monomial>,
}

impl Poly {
    pub fn zero() -> Self {
        Poly { terms: Vec::new() }
    }

    pub fn constant(k: i64) -> Self {
        Poly::from_terms(vec![Monomial { ea: 0, ec: 0, es: 0, em: 0, eg: 0, k }])
    }

    pub fn one() -> Self {
        Poly::constant(1)
    }

    pub fn atom(atom: Atom) -> Self {
        Poly::atom_pow(atom, 1)
    }

    pub fn atom_pow(atom: Atom, e: u8) -> Self {
        let mut m = Monomial { ea: 0, ec: 0, es: 0, em: 0, eg: 0, k: 1 };
        match atom {
            Atom::A => m.ea = e,
            Atom::C => m.ec = e,
            Atom::InvSigmaSq => m.es = e,
            Atom::Mu => m.em = e,
            Atom::Gamma => m.eg = e,
        }
        Poly::from_terms(vec![m])
    }

    pub fn from_terms(terms: Vec<Monomial>) -> Self {
        let mut p = Poly { terms };
        p.normalize();
        p
    }

    fn normalize(&mut self) {
        self.terms.sort_by_key(|m| m.key());
        let mut out: Vec<Monomial> = Vec::with_capacity(self.terms.len());
        for m in self.terms.drain(..) {
            match out.last_mut() {
                Some(last) if last.key() == m.key() => {
                    last.k = last.k.checked_add(m.k).expect("coefficient overflow");
                }
                _ => out.push(m),
            }
        }
        out.retain(|m| m.k != 0);
        self.terms = out;
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Poly::from_terms(terms)
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Poly {
        Poly {
            terms: self.terms.iter().map(|m| Monomial { k: -m.k, ..*m }).collect(),
        }
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for x in &self.terms {
            for y in &other.terms {
                terms.push(x.mul(y));
            }
        }
        Poly::from_terms(terms)
    }

    pub fn scale(&self, k: i64) -> Poly {
        if k == 0 {
            return Poly::zero();
        }
        Poly {
            terms: self
                .terms
                .iter()
                .map(|m| Monomial { k: m.k.checked_mul(k).expect("coefficient overflow"), ..*m })
                .collect(),
        }
    }

    /// Full numeric evaluation.
    pub fn eval(&self, a: f64, c: f64, inv_sigma_sq: f64, mu: f64, gamma: f64) -> f64 {
        self.terms
            .iter()
            .map(|m| {
                m.k as f64
                    * a.powi(m.ea as i32)
                    * c.powi(m.ec as i32)
                    * inv_sigma_sq.powi(m.es as i32)
                    * mu.powi(m.em as i32)
                    * gamma.powi(m.eg as i32)
            })
            .sum()
    }

    /// Folds the per-run constants, leaving `(factor, mu_pow, gamma_pow)`
    /// monomials to evaluate per time step.
    pub fn compile(&self, a: f64, c: f64, inv_sigma_sq: f64) -> CompiledPoly {
        let mut terms: Vec<(f64, u8, u8)> = Vec::new();
        for m in &self.terms {
            let k = m.k as f64
                * a.powi(m.ea as i32)
                * c.powi(m.ec as i32)
                * inv_sigma_sq.powi(m.es as i32);
            if let Some(t) = terms.iter_mut().find(|t| t.1 == m.em && t.2 == m.eg) {
                t.0 += k;
            } else {
                terms.push((k, m.em, m.eg));
            }
        }
        terms.retain(|t| t.0 != 0.0);
        CompiledPoly { terms }
    }

    /// Largest `mu` and `gam` exponents, for power-table sizing.
    pub fn max_state_pows(&self) -> (u8, u8) {
        self.terms.iter().fold((0, 0), |(m, g), t| (m.max(t.em), g.max(t.eg)))
    }
}

/// Per-run compiled form of a [`Poly`].
#[derive(Debug, Clone)]
pub struct CompiledPoly {
    pub terms: Vec<(f64, u8, u8)>,
}

impl CompiledPoly {
    #[inline]
    pub fn eval(&self, mu_pows: &[f64], gamma_pows: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|&(k, em, eg)| k * mu_pows[em as usize] * gamma_pows[eg as usize])
            .sum()
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (idx, m) in self.terms.iter().enumerate() {
            let mut factors: Vec<String> = Vec::new();
            for (sym, e) in [("a", m.ea), ("c", m.ec), ("is2", m.es), ("mu", m.em), ("gam", m.eg)]
            {
                match e {
                    0 => {}
                    1 => factors.push(sym.to_string()),
                    _ => factors.push(format!("{sym}^{e}")),
                }
            }
            let mag = m.k.unsigned_abs();
            let body = if factors.is_empty() {
                format!("{mag}")
            } else if mag == 1 {
                factors.join("*")
            } else {
                format!("{mag}*{}", factors.join("*"))
            };
            if idx == 0 {
                if m.k < 0 {
                    write!(f, "-{body}")?;
                } else {
                    write!(f, "{body}")?;
                }
            } else if m.k < 0 {
                write!(f, " - {body}")?;
            } else {
                write!(f, " + {body}")?;
            }
        }
        Ok(())
    }
}
