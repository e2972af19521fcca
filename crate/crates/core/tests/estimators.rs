mod common;

use proptest::prelude::*;

use common::subject;
use tvexp_core::data::{truncate_at_event, Cohort, ExposurePath};
use tvexp_core::estimators::{
    bootstrap_variance, estimate_locf, estimate_mi, estimate_rc, rc_paths, rubin_pool, EstimateResult, EstimatorError,
    Method, DEFAULT_IMPUTATIONS,
};
use tvexp_core::lmm::{fit_lmm, LmmSpec};
use tvexp_core::numerics::{Matrix, RngStream};
use tvexp_core::simulate::{generate, main_scenario};
use tvexp_core::survival::fit_cox;

fn scenario(n: usize, subjects: usize, seed: u64) -> (Cohort, tvexp_core::simulate::GeneratedTruth) {
    let mut sc = main_scenario(n).unwrap();
    sc.n_subjects = subjects;
    generate(&sc, &RngStream::new(seed, 0)).unwrap()
}

#[test]
fn locf_with_one_visit_is_a_baseline_cox_model() {
    let subjects: Vec<_> = (0..40)
        .map(|i| {
            let f = i as f64;
            subject(
                &format!("s{i}"),
                &[(0.0, (f * 0.37) % 2.0 - 1.0)],
                0.5 + (f * 0.61) % 6.0,
                i % 4 != 0,
            )
        })
        .collect();
    let c = Cohort::new(subjects, true, vec![]).unwrap();
    let paths: Vec<ExposurePath> = c
        .subjects()
        .iter()
        .map(|s| ExposurePath::constant(s.visits[0].value, 10.0))
        .collect();
    let baseline = fit_cox(&c, &paths, &[]).unwrap();
    let locf = estimate_locf(&c).unwrap();
    assert!((locf.gamma_hat - baseline.exposure_coef()).abs() < 1e-12);
    assert!((locf.se_total - baseline.exposure_var().sqrt()).abs() < 1e-12);
}

#[test]
fn locf_is_unbiased_when_exposure_only_changes_at_visits() {
    // Error-free exposure constant within each subject: carrying the last
    // value forward reproduces the true path exactly.
    let mut sc = main_scenario(7).unwrap();
    sc.n_subjects = 2000;
    sc.error_sd = 0.0;
    sc.fixed_effects = vec![0.5, 0.0];
    sc.re_cov = Matrix::from_diag(&[1.0, 0.0]);
    let (cohort, truth) = generate(&sc, &RngStream::new(31, 0)).unwrap();
    let r = estimate_locf(&cohort).unwrap();
    let oracle = fit_cox(&cohort, &truth.paths, &[]).unwrap();
    assert!((r.gamma_hat - oracle.exposure_coef()).abs() < 1e-10);
    assert!(
        (r.gamma_hat - 0.4).abs() < 3.0 * r.se_total,
        "{} ± {}",
        r.gamma_hat,
        r.se_total
    );
}

#[test]
fn bootstrap_without_stage_one_uncertainty_is_the_cox_variance() {
    let (cohort, _) = scenario(2, 200, 3);
    let c = truncate_at_event(&cohort);
    let spec = LmmSpec::linear();
    let mut stage1 = fit_lmm(&c, &spec).unwrap();
    let k = stage1.theta.len();
    stage1.param_cov = Matrix::zeros(k, k);
    let paths = rc_paths(&c, &spec, &stage1.params()).unwrap();
    let single = fit_cox(&c, &paths, &[]).unwrap();
    let boot = bootstrap_variance(
        |p| {
            let paths = rc_paths(&c, &spec, p)?;
            fit_cox(&c, &paths, &[]).map_err(|e| EstimatorError::Argument(e.to_string()))
        },
        &stage1,
        5,
        &RngStream::new(1, 0),
    )
    .unwrap();
    assert_eq!(boot.between, 0.0);
    assert!((boot.variance - single.exposure_var()).abs() <= 1e-12 * single.exposure_var());
}

#[test]
fn rc_total_variance_is_at_least_the_naive_variance() {
    let spec = LmmSpec::linear();
    for seed in 0..4 {
        let (cohort, _) = scenario(11, 250, 100 + seed);
        let r = estimate_rc(&cohort, &spec, false, 30, &RngStream::new(seed, 1)).unwrap();
        let naive = r.diagnostics["se_naive"];
        assert!(r.se_total >= naive, "seed {seed}: {} < {naive}", r.se_total);
        assert!(r.diagnostics["boot_between_var"] >= 0.0);
    }
}

#[test]
fn rc_and_post_event_rc_coincide_without_post_event_visits() {
    let (_, truth) = scenario(3, 400, 9);
    // Visits stop at t=4 and only subjects still at risk then are kept, so
    // truncation at the event removes nothing while events remain.
    let kept: Vec<_> = truth
        .full_cohort
        .subjects()
        .iter()
        .filter(|s| s.event_time >= 4.0)
        .map(|s| {
            let mut s = s.clone();
            s.visits.retain(|v| v.time <= 4.0);
            s
        })
        .collect();
    let c = Cohort::new(kept, false, vec![]).unwrap();
    assert!(c.len() > 100 && c.n_events() > 20);
    assert_eq!(truncate_at_event(&c).n_visits(), c.n_visits());
    let spec = LmmSpec::linear();
    let stream = RngStream::new(4, 0);
    let rc = estimate_rc(&c, &spec, false, 0, &stream).unwrap();
    let pe = estimate_rc(&c, &spec, true, 0, &stream).unwrap();
    assert_eq!(rc.method, Method::Rc);
    assert_eq!(pe.method, Method::PeRc);
    assert_eq!(rc.gamma_hat, pe.gamma_hat);
    assert_eq!(rc.se_total, pe.se_total);
}

#[test]
fn mi_without_measurement_error_collapses_to_the_true_exposure_fit() {
    let mut sc = main_scenario(8).unwrap();
    sc.error_sd = 0.0;
    sc.visit_spacing = 0.1;
    sc.n_subjects = 300;
    let (cohort, truth) = generate(&sc, &RngStream::new(12, 0)).unwrap();
    let reference = fit_cox(&cohort, &truth.paths, &[]).unwrap().exposure_coef();
    let r = estimate_mi(
        &cohort,
        &LmmSpec::linear(),
        DEFAULT_IMPUTATIONS,
        0,
        &RngStream::new(8, 0),
    )
    .unwrap();
    assert_eq!(r.diagnostics["imputations"], DEFAULT_IMPUTATIONS as f64);
    assert!((r.gamma_hat - reference).abs() < 1e-3, "{} vs {reference}", r.gamma_hat);
    assert!(r.diagnostics["between_var"] < 1e-6, "{}", r.diagnostics["between_var"]);
}

proptest! {
    #[test]
    fn rubin_pool_ignores_imputation_order(
        pairs in prop::collection::vec((-1.0f64..1.0, 1e-4f64..0.1), 2..12),
        rot in 0usize..12,
    ) {
        let (est, var): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let a = rubin_pool(&est, &var).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rot % pairs.len());
        shuffled.reverse();
        let (est2, var2): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
        let b = rubin_pool(&est2, &var2).unwrap();
        prop_assert!((a.0 - b.0).abs() <= 1e-14 && (a.1 - b.1).abs() <= 1e-14 * a.1);
        let within = var.iter().sum::<f64>() / var.len() as f64;
        prop_assert!(a.1 >= within * (1.0 - 1e-14));
    }

    #[test]
    fn identical_imputations_pool_to_the_common_value(g in -1.0f64..1.0, v in 1e-4f64..0.1, m in 2usize..20) {
        let (est, var) = rubin_pool(&vec![g; m], &vec![v; m]).unwrap();
        prop_assert!((est - g).abs() <= 1e-15 * g.abs().max(1.0));
        prop_assert!((var - v).abs() <= 1e-15 * v);
    }

    #[test]
    fn confidence_interval_is_symmetric(g in -2.0f64..2.0, se in 1e-3f64..1.0) {
        let r = EstimateResult::new(Method::Jm, g, se, true);
        prop_assert!(r.ci95.0 < r.ci95.1);
        prop_assert!((r.ci95.1 - g - 1.959964 * se).abs() < 1e-6 * se);
        prop_assert!((g - r.ci95.0 - 1.959964 * se).abs() < 1e-6 * se);
    }
}
