mod common;

use proptest::prelude::*;

use common::gls_loglik;
use tvexp_core::data::{truncate_at_event, Cohort};
use tvexp_core::lmm::{fit_lmm, loglik, loglik_and_score, predict_exposure, LmmParams, LmmSpec, PredictMode};
use tvexp_core::numerics::{Matrix, RngStream};
use tvexp_core::simulate::{generate, main_scenario};

fn small_cohort(seed: u64, n: usize) -> Cohort {
    let mut sc = main_scenario(5).unwrap();
    sc.n_subjects = n;
    generate(&sc, &RngStream::new(seed, 0)).unwrap().0
}

fn params(b0: f64, b1: f64, l: [f64; 3], sigma2: f64) -> LmmParams {
    // B = L Lᵀ with L lower triangular, always positive definite.
    let (a, c, d) = (l[0], l[1], l[2]);
    LmmParams {
        beta: vec![b0, b1],
        zeta: vec![],
        re_cov: Matrix::from_rows(&[[a * a, a * c], [a * c, c * c + d * d]]),
        sigma2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loglik_matches_dense_gls(
        seed in 0u64..1000,
        b in (-1.0f64..1.0, 0.0f64..2.0),
        l in (0.2f64..1.5, -0.5f64..0.5, 0.1f64..1.0),
        sigma2 in 0.2f64..10.0,
    ) {
        let c = small_cohort(seed, 25);
        let p = params(b.0, b.1, [l.0, l.1, l.2], sigma2);
        let ours = loglik(&c, &LmmSpec::linear(), &p).unwrap();
        let gls = gls_loglik(&c, &p);
        prop_assert!((ours - gls).abs() <= 1e-8 * gls.abs().max(1.0), "{ours} vs {gls}");
    }

    #[test]
    fn loglik_is_a_sum_over_subjects(seed in 0u64..1000, sigma2 in 0.5f64..5.0) {
        let c = small_cohort(seed, 12);
        let spec = LmmSpec::linear();
        let p = params(0.1, 0.9, [1.0, 0.1, 0.6], sigma2);
        let whole = loglik(&c, &spec, &p).unwrap();
        let parts: f64 = c
            .subjects()
            .iter()
            .map(|s| {
                let one = Cohort::new(vec![s.clone()], c.truncated_at_event(), vec![]).unwrap();
                loglik(&one, &spec, &p).unwrap()
            })
            .sum();
        prop_assert!((whole - parts).abs() <= 1e-10 * whole.abs());
    }

    #[test]
    fn score_matches_finite_differences(
        seed in 0u64..1000,
        theta in prop::collection::vec(-0.8f64..0.8, 6),
    ) {
        let c = small_cohort(seed, 20);
        let spec = LmmSpec::linear();
        let (_, score) = loglik_and_score(&c, &spec, &theta).unwrap();
        for j in 0..theta.len() {
            let h = 1e-5;
            let mut up = theta.clone();
            up[j] += h;
            let mut dn = theta.clone();
            dn[j] -= h;
            let fd = (loglik_and_score(&c, &spec, &up).unwrap().0 - loglik_and_score(&c, &spec, &dn).unwrap().0)
                / (2.0 * h);
            prop_assert!((score[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "slot {j}: {} vs {fd}", score[j]);
        }
    }
}

#[test]
fn self_generation_within_three_standard_errors() {
    let mut sc = main_scenario(1).unwrap();
    sc.n_subjects = 2000;
    assert_eq!(sc.fixed_effects, vec![0.0, 1.0]);
    assert_eq!(sc.error_sd, 1.0);
    let (_, truth) = generate(&sc, &RngStream::new(77, 0)).unwrap();
    let spec = LmmSpec::linear();
    let fit = fit_lmm(&truth.full_cohort, &spec).unwrap();
    let g = tvexp_core::lmm::loglik_and_score(&truth.full_cohort, &spec, &fit.theta)
        .unwrap()
        .1;
    assert!(fit.converged, "iterations {} score {g:?}", fit.iterations);
    let target = fit
        .layout
        .pack(&LmmParams {
            beta: vec![0.0, 1.0],
            zeta: vec![],
            re_cov: Matrix::from_diag(&[1.0, 0.5]),
            sigma2: 1.0,
        })
        .unwrap();
    for (j, (est, tru)) in fit.theta.iter().zip(&target).enumerate() {
        let se = fit.param_cov[(j, j)].sqrt();
        assert!(se > 0.0);
        assert!((est - tru).abs() < 3.0 * se, "slot {j}: {est} vs {tru} (se {se})");
    }
}

#[test]
fn noiseless_lines_are_interpolated() {
    let mut sc = main_scenario(2).unwrap();
    sc.error_sd = 0.0;
    sc.n_subjects = 300;
    let (cohort, truth) = generate(&sc, &RngStream::new(5, 0)).unwrap();
    let cohort = truncate_at_event(&cohort);
    let spec = LmmSpec::linear();
    let fit = fit_lmm(&cohort, &spec).unwrap();
    assert!(fit.sigma2 < 1e-6, "sigma2 {}", fit.sigma2);
    for (s, path) in cohort.subjects().iter().zip(&truth.paths) {
        // Two visits pin a line; one visit leaves the slope to the prior.
        if s.visits.len() < 2 {
            continue;
        }
        let fitted = predict_exposure(&fit, s, &spec, PredictMode::Mean).unwrap();
        for k in 0..=20 {
            let t = k as f64 * 0.5;
            assert!(
                (fitted.value(t) - path.value(t)).abs() < 1e-6,
                "{}: t={t} diff {} visits {:?}",
                s.id,
                fitted.value(t) - path.value(t),
                s.visits
            );
        }
    }
}
