use proptest::prelude::*;

use tvexp_core::numerics::RngStream;
use tvexp_core::simulate::{generate, main_scenario};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn visit_schedule_respects_spacing_and_events(
        n in 1usize..=12,
        spacing in 0.3f64..4.0,
        horizon in 1.0f64..15.0,
        missing in 0.0f64..0.6,
        seed in any::<u64>(),
    ) {
        let mut sc = main_scenario(n).unwrap();
        sc.n_subjects = 60;
        sc.visit_spacing = spacing;
        sc.horizon = horizon;
        sc.missing_rate = missing;
        let (cohort, truth) = generate(&sc, &RngStream::new(seed, 0)).unwrap();
        let cap = (horizon / spacing).floor() as usize + 1;
        prop_assert!(cohort.truncated_at_event());
        prop_assert_eq!(cohort.len(), 60);
        prop_assert_eq!(truth.paths.len(), 60);
        prop_assert_eq!(truth.full_cohort.len(), 60);
        for (s, full) in cohort.subjects().iter().zip(truth.full_cohort.subjects()) {
            prop_assert!(s.visits.len() <= cap);
            prop_assert!(full.visits.len() <= cap);
            prop_assert!(s.event_time > 0.0 && s.event_time <= horizon);
            prop_assert!(s.visits.iter().all(|v| v.time <= s.event_time));
            prop_assert!(s.visits.windows(2).all(|w| w[0].time < w[1].time));
            prop_assert_eq!(&s.id, &full.id);
            prop_assert_eq!(s.event_time, full.event_time);
        }
    }

    #[test]
    fn same_seed_same_cohort(seed in any::<u64>(), n in 1usize..=12) {
        let mut sc = main_scenario(n).unwrap();
        sc.n_subjects = 40;
        let a = generate(&sc, &RngStream::new(seed, 3)).unwrap().0;
        let b = generate(&sc, &RngStream::new(seed, 3)).unwrap().0;
        let c = generate(&sc, &RngStream::new(seed, 4)).unwrap().0;
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a, &c);
    }
}
