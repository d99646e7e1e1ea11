//! Property tests for the invariants of the learning components.

use proptest::prelude::*;

use lwpr2_core::gmm::{EmConfig, GmmModel};
use lwpr2_core::lwpr::{LwprConfig, LwprModel};
use lwpr2_core::mppi::softmin_weights;
use lwpr2_core::sim::{wrap_angle, Input, TrainingPair};
use lwpr2_core::standardize::Standardizer;
use lwpr2_core::trainer::{combined_inner, constrained_alpha, dot};

fn input() -> impl Strategy<Value = Input> {
    prop::array::uniform6(-3.0f64..3.0)
}

fn gradient(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn alpha_is_in_unit_interval_and_keeps_synthetic_descent(
        (g_l, g_id) in (1usize..64).prop_flat_map(|d| (gradient(d), gradient(d)))
    ) {
        let a = constrained_alpha(&g_l, &g_id);
        prop_assert!((0.0..=1.0).contains(&a));
        let n = dot(&g_id, &g_id);
        prop_assert!(combined_inner(a, &g_l, &g_id) >= -1e-12 * n);
        if dot(&g_l, &g_id) >= 0.0 {
            prop_assert_eq!(a, 1.0);
        }
    }

    #[test]
    fn alpha_is_the_largest_feasible_value(
        (g_l, g_id) in (1usize..64).prop_flat_map(|d| (gradient(d), gradient(d)))
    ) {
        let a = constrained_alpha(&g_l, &g_id);
        if a < 1.0 {
            let n = dot(&g_id, &g_id);
            let step = (1.0 - a).min(1e-6);
            prop_assert!(combined_inner(a + step, &g_l, &g_id) < 1e-9 * n.max(1.0));
        }
    }

    #[test]
    fn softmin_weights_are_a_distribution(
        costs in prop::collection::vec(prop_oneof![9 => 0.0f64..1e4, 1 => Just(f64::INFINITY)], 1..64),
        temperature in 0.01f64..100.0,
    ) {
        let (weights, best, _) = softmin_weights(&costs, temperature);
        match weights {
            None => prop_assert!(costs.iter().all(|c| !c.is_finite())),
            Some(w) => {
                prop_assert_eq!(w.len(), costs.len());
                prop_assert!(w.iter().all(|v| *v >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (c, v) in costs.iter().zip(&w) {
                    if !c.is_finite() {
                        prop_assert_eq!(*v, 0.0);
                    }
                }
                let top = costs.iter().position(|c| *c == best).unwrap();
                prop_assert!(w.iter().all(|v| *v <= w[top]));
            }
        }
    }

    #[test]
    fn equal_constant_fields_form_a_partition_of_unity(
        centers in prop::collection::vec(input(), 1..12),
        value in -5.0f64..5.0,
        query in input(),
    ) {
        let mut m = LwprModel::new(LwprConfig { cutoff: 0.0, ..LwprConfig::default() }, 0).unwrap();
        for c in centers {
            m.push_field(LwprModel::constant_field(c, [0.5; 6], value)).unwrap();
        }
        let p = m.predict(&query).unwrap();
        prop_assert!((p.value - value).abs() <= 1e-12 * value.abs().max(1.0));
    }

    #[test]
    fn field_count_never_decreases(samples in prop::collection::vec((input(), -5.0f64..5.0), 1..80)) {
        let mut m = LwprModel::new(LwprConfig::default(), 0).unwrap();
        let mut last = 0;
        for (x, y) in samples {
            let r = m.update(&x, y).unwrap();
            prop_assert!(m.num_fields() >= last);
            prop_assert_eq!(m.num_fields(), last + usize::from(r.field_created));
            last = m.num_fields();
        }
    }

    #[test]
    fn distant_updates_leave_local_predictions_unchanged(
        local in prop::collection::vec((input(), -5.0f64..5.0), 1..30),
        far in prop::collection::vec((input(), -5.0f64..5.0), 1..30),
        query in input(),
    ) {
        let mut m = LwprModel::new(LwprConfig::default(), 0).unwrap();
        for (x, y) in &local {
            m.update(x, *y).unwrap();
        }
        let before = m.predict(&query).unwrap();
        prop_assume!(!before.extrapolated);
        for (x, y) in &far {
            let shifted: Input = std::array::from_fn(|j| x[j] + 100.0);
            m.update(&shifted, *y).unwrap();
        }
        let after = m.predict(&query).unwrap();
        prop_assert!((after.value - before.value).abs() < 1e-9);
    }

    #[test]
    fn mixture_weights_sum_to_one(
        data in prop::collection::vec(input(), 40..120),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let g = GmmModel::fit_em(&data, k, &EmConfig::default(), seed).unwrap();
        let total: f64 = g.components().iter().map(|c| c.weight).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(g.components().iter().all(|c| c.weight >= 0.0 && c.var_diag.iter().all(|v| *v > 0.0)));
        let trace = g.loglik_trace();
        for w in trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        }
    }

    #[test]
    fn standardizer_round_trips(
        pairs in prop::collection::vec((input(), prop::array::uniform4(-5.0f64..5.0)), 2..40),
        probe in input(),
    ) {
        let pairs: Vec<TrainingPair> =
            pairs.into_iter().map(|(x, y)| TrainingPair { timestamp: 0.0, x, y, synthetic: false }).collect();
        let s = Standardizer::fit(&pairs).unwrap();
        let back = s.x_inv(&s.x(&probe));
        for j in 0..6 {
            prop_assert!((back[j] - probe[j]).abs() <= 1e-9 * probe[j].abs().max(1.0));
        }
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -1e4f64..1e4) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI);
        prop_assert!(((a - w) / (2.0 * std::f64::consts::PI)).fract().abs() < 1e-6
            || (1.0 - ((a - w) / (2.0 * std::f64::consts::PI)).fract().abs()) < 1e-6);
    }
}
