use proptest::prelude::*;

use tvexp_core::data::{
    read_cohort_from, truncate_at_event, write_cohort_to, Cohort, ReadOptions, SubjectRecord, TimeBasis, Visit,
};

fn cohort_strategy(with_age: bool) -> impl Strategy<Value = Cohort> {
    let subj = (
        prop::collection::vec((0.01f64..2.0, -1e3f64..1e3), 1..6),
        0.01f64..12.0,
        any::<bool>(),
        -50.0f64..120.0,
    );
    prop::collection::vec(subj, 1..10).prop_map(move |raw| {
        let subjects = raw
            .into_iter()
            .enumerate()
            .map(|(i, (steps, t, e, age))| {
                let mut time = 0.0;
                let visits = steps
                    .into_iter()
                    .enumerate()
                    .map(|(k, (gap, value))| {
                        if k > 0 {
                            time += gap;
                        }
                        Visit { time, value }
                    })
                    .collect();
                let mut s = SubjectRecord::new(format!("id-{i}"), visits, t, e);
                if with_age {
                    s.covariates.insert("age".into(), age);
                }
                s
            })
            .collect();
        let names = if with_age { vec!["age".to_string()] } else { vec![] };
        Cohort::new(subjects, false, names).unwrap()
    })
}

proptest! {
    #[test]
    fn csv_round_trip_is_identity(c in cohort_strategy(true)) {
        let (mut long, mut surv) = (Vec::new(), Vec::new());
        write_cohort_to(&c, &mut long, &mut surv).unwrap();
        let (back, report) = read_cohort_from(&long[..], &surv[..], ReadOptions::default()).unwrap();
        prop_assert_eq!(report.dropped_missing, 0);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn truncation_is_idempotent_and_keeps_survival_fields(c in cohort_strategy(false)) {
        let once = truncate_at_event(&c);
        prop_assert!(once.truncated_at_event());
        prop_assert_eq!(&truncate_at_event(&once), &once);
        for (a, b) in c.subjects().iter().zip(once.subjects()) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.event_time, b.event_time);
            prop_assert_eq!(a.event, b.event);
            prop_assert!(b.visits.iter().all(|v| v.time <= b.event_time));
            let kept: Vec<Visit> = a.visits.iter().copied().filter(|v| v.time <= a.event_time).collect();
            prop_assert_eq!(&b.visits, &kept);
        }
    }

    #[test]
    fn bases_are_deterministic_and_continuous(
        degree in 0usize..4,
        mut knots in prop::collection::vec(0.5f64..9.5, 1..5),
        t in 0.0f64..10.0,
    ) {
        knots.sort_by(f64::total_cmp);
        knots.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        let bases = [
            TimeBasis::polynomial(degree),
            TimeBasis::natural_spline(knots, (0.0, 10.0)).unwrap(),
        ];
        for b in &bases {
            let x = b.evaluate(t);
            prop_assert_eq!(x.len(), b.dimension());
            prop_assert_eq!(&x, &b.evaluate(t));
            let h = 1e-9;
            let y = b.evaluate(t + h);
            for (u, v) in x.iter().zip(&y) {
                prop_assert!((u - v).abs() < 1e-6, "jump of {} at t={}", v - u, t);
            }
        }
    }
}
