//! Property tests for the structural invariants the numerics lean on:
//! degree bookkeeping of the differentiation rules, determinism of closure
//! discovery, triangular index packing, and the clipping contract.

use proptest::collection::vec;
use proptest::prelude::*;

use expfilter::aterm::{
    derive_closure, differentiate, tri_index, tri_len, ATermSpec, Target,
    DEFAULT_CLOSURE_BUDGET,
};
use expfilter::filter::clip_coefficients;

fn arb_spec(max_n: usize) -> impl Strategy<Value = ATermSpec> {
    (1..=max_n).prop_flat_map(|n| {
        (
            vec(0..=2u8, n),
            vec(0..=2u8, n),
            vec(0..=1u8, tri_len(n)),
            vec(0..=1u8, n),
        )
            .prop_map(|(p, q, r, alpha)| ATermSpec::new(p, q, r, alpha).unwrap())
    })
}

proptest! {
    /// Every same-order term of a derivative preserves the weighted degree;
    /// every boundary term drops the order by one without raising it.
    #[test]
    fn differentiation_respects_the_degree_measure(spec in arb_spec(3)) {
        let deg = spec.weighted_degree();
        let n = spec.order();
        for term in differentiate(&spec) {
            if let Target::Spec(t) = &term.target {
                if t.order() == n {
                    prop_assert_eq!(t.weighted_degree(), deg, "same-order edge to {}", t);
                } else {
                    prop_assert_eq!(t.order(), n - 1, "boundary edge to {}", t);
                    prop_assert!(t.weighted_degree() <= deg, "degree rose on {}", t);
                }
            }
        }
    }

    /// Closure discovery is a pure function of the seed set: repeated runs
    /// agree exactly and seed order is irrelevant.
    #[test]
    fn closure_discovery_is_deterministic(
        mut seeds in proptest::collection::vec(arb_spec(2), 1..4),
        rotate in 0..4usize,
    ) {
        let first = derive_closure(&seeds, DEFAULT_CLOSURE_BUDGET).unwrap();
        let again = derive_closure(&seeds, DEFAULT_CLOSURE_BUDGET).unwrap();
        prop_assert_eq!(first.listing(), again.listing());

        let k = rotate % seeds.len();
        seeds.rotate_left(k);
        let permuted = derive_closure(&seeds, DEFAULT_CLOSURE_BUDGET).unwrap();
        let mut a: Vec<String> = first.specs().iter().map(|s| s.to_string()).collect();
        let mut b: Vec<String> = permuted.specs().iter().map(|s| s.to_string()).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    /// The packed upper-triangle index is a bijection onto `0..tri_len(n)`.
    #[test]
    fn triangular_index_is_a_bijection(n in 1..8usize) {
        let mut seen = vec![false; tri_len(n)];
        for i in 0..n {
            for j in i..n {
                let idx = tri_index(n, i, j);
                prop_assert!(idx < seen.len());
                prop_assert!(!seen[idx], "collision at ({i}, {j})");
                seen[idx] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    /// Clipping: order zero passes through, every higher order obeys the
    /// per-step cap against its clipped predecessor, signs survive, and an
    /// infinite ratio is the identity.
    #[test]
    fn clipping_contract_holds_pointwise(
        rows in 1..4usize,
        len in 1..30usize,
        raw in vec(-100.0..100.0f64, 4 * 30),
        eps in 0.05..1.0f64,
        r in 0.05..5.0f64,
    ) {
        let coef: Vec<Vec<f64>> =
            (0..=rows).map(|m| raw[m * len..(m + 1) * len].to_vec()).collect();
        let clipped = clip_coefficients(&coef, eps, r).unwrap();

        prop_assert_eq!(&clipped[0], &coef[0]);
        for m in 1..=rows {
            for k in 0..len {
                let cap = r * (clipped[m - 1][k] * eps.powi(m as i32 - 1)).abs();
                let val = (clipped[m][k] * eps.powi(m as i32)).abs();
                prop_assert!(
                    val <= cap * (1.0 + 1e-12) + f64::MIN_POSITIVE,
                    "bound broken at order {m}, index {k}: {val} > {cap}"
                );
                prop_assert!(
                    clipped[m][k] == 0.0
                        || clipped[m][k].signum() == coef[m][k].signum(),
                    "sign flipped at order {m}, index {k}"
                );
            }
        }

        let identity = clip_coefficients(&coef, eps, f64::INFINITY).unwrap();
        prop_assert_eq!(identity, coef);
    }
}
