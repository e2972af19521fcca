use proptest::prelude::*;

use tvexp_core::numerics::{brent_root, cholesky, gauss_hermite, gauss_legendre, Matrix};

/// `∫ e^{-x²} x^{2k} dx = √π (2k-1)!! / 2^k`.
fn hermite_moment(k: u32) -> f64 {
    let mut m = std::f64::consts::PI.sqrt();
    for j in 1..=k {
        m *= (2 * j - 1) as f64 / 2.0;
    }
    m
}

proptest! {
    #[test]
    fn cholesky_reconstructs_spd_matrices(entries in prop::collection::vec(-2.0f64..2.0, 16), ridge in 0.1f64..3.0) {
        let a = Matrix::from_rows(&entries.chunks(4).collect::<Vec<_>>());
        let mut m = a.matmul(&a.transpose());
        for i in 0..4 {
            m[(i, i)] += ridge;
        }
        let l = cholesky(&m).unwrap();
        let back = l.matmul(&l.transpose());
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((back[(i, j)] - m[(i, j)]).abs() < 1e-12 * m[(i, i)].max(1.0));
                if j > i {
                    prop_assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn hermite_rules_integrate_monomials_exactly(n in 1usize..30, k in 0u32..10) {
        prop_assume!(2 * k as usize + 1 < 2 * n);
        let (x, w) = gauss_hermite(n).unwrap();
        let even: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(2 * k as i32)).sum();
        let odd: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(2 * k as i32 + 1)).sum();
        let exact = hermite_moment(k);
        prop_assert!((even - exact).abs() <= 1e-10 * exact, "n={n} k={k}: {even} vs {exact}");
        prop_assert!(odd.abs() <= 1e-10 * hermite_moment(k + 1).max(1.0));
    }

    #[test]
    fn legendre_rules_integrate_monomials_exactly(n in 1usize..40, k in 0u32..20) {
        prop_assume!(2 * k as usize + 1 < 2 * n);
        let (x, w) = gauss_legendre(n).unwrap();
        let even: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(2 * k as i32)).sum();
        let exact = 2.0 / (2 * k + 1) as f64;
        prop_assert!((even - exact).abs() <= 1e-10, "n={n} k={k}");
    }

    #[test]
    fn brent_finds_bracketed_cubic_roots(r in -5.0f64..5.0, a in 0.1f64..3.0, c in 0.0f64..2.0) {
        // Monotone cubic with a single real root at r.
        let f = |x: f64| a * (x - r) + c * (x - r).powi(3);
        let root = brent_root(f, -10.0, 10.0, 1e-12).unwrap();
        prop_assert!((root - r).abs() < 1e-9);
    }
}
