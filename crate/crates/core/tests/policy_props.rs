mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn policy_invariants_hold_on_random_specs(seed in any::<u64>()) {
        if let Err(e) = common::check_episode(seed, 15) {
            prop_assert!(false, "{}", e);
        }
    }

    #[test]
    fn query_engine_matches_row_scan(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let t = common::random_table(&mut r);
        let q = common::random_query(&mut r);
        prop_assert_eq!(t.execute(&q).unwrap(), common::oracle_execute(&t, &q));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn crashed_sessions_replay_and_resume(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        if let Err(e) = common::crash_and_resume(seed, dir.path()) {
            prop_assert!(false, "{}", e);
        }
    }
}

#[test]
fn generated_specs_stay_within_bounds() {
    for seed in 0..200 {
        let spec = common::random_spec(&mut common::rng(seed));
        let tasks: Vec<_> = spec.task_worksheets().collect();
        assert!(tasks.len() <= 3);
        assert!(tasks.iter().all(|w| w.fields.len() <= 6));
        assert_eq!(spec.top_level().name, "Main");
    }
}
