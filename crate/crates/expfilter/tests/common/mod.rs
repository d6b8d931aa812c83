//! Helpers shared by the integration-test binaries. Everything here is an
//! independent oracle: no code path below touches the symbolic engine.

#![allow(dead_code)]

/// Physicists' Hermite polynomial `H_n(x)` by the three-term recurrence.
fn hermite_phys(n: usize, x: f64) -> f64 {
    let mut h0 = 1.0;
    if n == 0 {
        return h0;
    }
    let mut h1 = 2.0 * x;
    for k in 1..n {
        let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Gauss-Hermite nodes and weights for `integral f(x) exp(-x^2) dx`.
/// Roots are located by a sign scan plus bisection, which is slow but
/// dependency-free and exact enough for test tolerances.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let bound = (2.0 * n as f64 + 1.0).sqrt() + 1.0;
    let scan = 200 * n;
    let mut roots = Vec::with_capacity(n);
    let mut prev_x = -bound;
    let mut prev_f = hermite_phys(n, prev_x);
    for i in 1..=scan {
        let x = -bound + 2.0 * bound * i as f64 / scan as f64;
        let f = hermite_phys(n, x);
        if prev_f == 0.0 {
            roots.push(prev_x);
        } else if prev_f.signum() != f.signum() {
            let (mut lo, mut hi) = (prev_x, x);
            let mut flo = prev_f;
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                let fmid = hermite_phys(n, mid);
                if fmid == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if flo.signum() == fmid.signum() {
                    lo = mid;
                    flo = fmid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev_x = x;
        prev_f = f;
    }
    assert_eq!(roots.len(), n, "root scan missed a Hermite root");

    let log_norm = (n as f64 - 1.0) * 2.0f64.ln()
        + (1..=n).map(|k| (k as f64).ln()).sum::<f64>()
        + 0.5 * std::f64::consts::PI.ln();
    let weights: Vec<f64> = roots
        .iter()
        .map(|&x| {
            let hm1 = hermite_phys(n - 1, x);
            (log_norm.exp() / (n as f64 * n as f64)) / (hm1 * hm1)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    assert!(
        (total - std::f64::consts::PI.sqrt()).abs() < 1e-10,
        "Gauss-Hermite weights sum to {total}, want sqrt(pi)"
    );
    (roots, weights)
}

/// Lower Cholesky factor of a small symmetric positive definite matrix
/// given as full rows.
pub fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = a.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i][j];
            for (lik, ljk) in l[i][..j].iter().zip(&l[j][..j]) {
                s -= lik * ljk;
            }
            if i == j {
                assert!(s > 0.0, "matrix is not positive definite");
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

/// `E[prod_i X_i^{e_i}]` for `X ~ N(mean, cov)` by tensorized Gauss-Hermite
/// quadrature, exact for polynomial integrands up to degree `2 * nodes - 1`.
pub fn gaussian_moment_quadrature(
    exps: &[u8],
    mean: &[f64],
    cov: &[Vec<f64>],
    nodes: usize,
) -> f64 {
    let d = exps.len();
    assert!((1..=3).contains(&d));
    let (xs, ws) = gauss_hermite(nodes);
    let l = cholesky(cov);
    let norm = std::f64::consts::PI.powf(-(d as f64) / 2.0);
    let sqrt2 = std::f64::consts::SQRT_2;

    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        let mut x = vec![0.0; d];
        for j in 0..d {
            w *= ws[idx[j]];
            for i in j..d {
                x[i] += l[i][j] * sqrt2 * xs[idx[j]];
            }
        }
        let mut f = 1.0;
        for i in 0..d {
            f *= (mean[i] + x[i]).powi(exps[i] as i32);
        }
        total += w * f;

        let mut carry = 0;
        loop {
            idx[carry] += 1;
            if idx[carry] < nodes {
                break;
            }
            idx[carry] = 0;
            carry += 1;
            if carry == d {
                return total * norm;
            }
        }
    }
}
