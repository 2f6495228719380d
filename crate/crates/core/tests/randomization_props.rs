use std::sync::Arc;

use proptest::prelude::*;
use rbsde_core::problem::{ControlSpace, FnCoefficients, JumpMeasure, ProblemSpec, Regime};
use rbsde_core::randomization::{
    ensemble_weights, estimate_randomized_reward, estimate_reward, log_doleans, IntensityControl,
};
use rbsde_core::sim::{simulate_controlled_paths, simulate_randomized_pair, PathEnsemble, SimOptions, TimeGrid};
use rbsde_core::stats::{combine, mean_stderr};

fn spec() -> ProblemSpec {
    let c = FnCoefficients::scalar(|_, s, a| a - s[0], |_, _, _| 1.0, |_, s, a| -(s[0] - a).abs().min(2.0));
    ProblemSpec::new(
        "toy",
        Arc::new(c),
        vec![0.0],
        ControlSpace::finite(vec![-1.0, 0.0, 1.0]).unwrap(),
        1.0,
        Regime::Bounded { f_sup: 2.0 },
        1.0,
    )
    .unwrap()
}

fn nominal(spec: &ProblemSpec, lambda: f64, t: f64, n: usize, seed: u64) -> PathEnsemble {
    let m = JumpMeasure::uniform(spec.control_space.clone(), lambda).unwrap();
    simulate_randomized_pair(spec, &m, 0.0, TimeGrid::with_step(t, 0.05).unwrap(), n, seed, SimOptions::default())
        .unwrap()
}

fn arb_intensity(max_bound: f64) -> impl Strategy<Value = IntensityControl> {
    prop_oneof![
        (0.5f64..max_bound, 0.01f64..1.0).prop_map(|(n, f)| IntensityControl::constant(n, f * n).unwrap()),
        (0.5f64..max_bound, 0.01f64..1.0, 0.01f64..1.0, 0usize..3).prop_map(|(n, h, l, i)| {
            IntensityControl::two_level(n, h * n, l * n, vec![[-1.0, 0.0, 1.0][i]]).unwrap()
        }),
        (0.5f64..max_bound, 0.01f64..1.0).prop_map(|(n, f)| {
            IntensityControl::custom(
                n,
                "state-feedback",
                move |_, s, cur, cand| {
                    if (cand - cur) * s[0] < 0.0 {
                        n
                    } else {
                        f * n
                    }
                },
            )
            .unwrap()
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn density_is_positive_and_finite(nu in arb_intensity(10.0), lambda in 0.2f64..4.0, seed in any::<u64>()) {
        let s = spec();
        let e = nominal(&s, lambda, 2.0, 40, seed);
        let m = e.measure.clone().unwrap();
        for (p, j) in e.jumps().unwrap().iter().enumerate() {
            let l = log_doleans(&nu, j, &e.grid, |k| e.summary(p, k), &m, 2.0).unwrap();
            prop_assert!(l.is_finite());
            prop_assert!(l.exp() > 0.0);
        }
    }

    #[test]
    fn density_has_unit_mean(nu in arb_intensity(2.0), lambda in 0.2f64..2.0, seed in any::<u64>()) {
        let s = spec();
        let e = nominal(&s, lambda, 1.0, 4000, seed);
        let w: Vec<f64> = ensemble_weights(&e, &nu, 1.0).unwrap().into_iter().map(|x| x.1).collect();
        let (m, se) = mean_stderr(&w);
        prop_assert!((m - 1.0).abs() <= 3.0 * se + 1e-12, "mean {} se {}", m, se);
    }
}

#[test]
fn unit_intensity_reweighting_is_the_plain_estimate() {
    let s = spec();
    let e = nominal(&s, 2.0, 3.0, 500, 9);
    let one = IntensityControl::constant(1.0, 1.0).unwrap();
    let a = estimate_randomized_reward(&e, &one, &s, 3.0).unwrap();
    let b = estimate_reward(&e, &s, 3.0).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
}

#[test]
fn truncation_bound_covers_horizon_extension() {
    let s = spec();
    let pol = |_: f64, x: &[f64]| if x[0] > 0.0 { -1.0 } else { 1.0 };
    let e = simulate_controlled_paths(&s, &pol, TimeGrid::with_step(8.0, 0.02).unwrap(), 4000, 21).unwrap();
    for (t, t2) in [(1.0, 2.0), (2.0, 8.0), (4.0, 6.0)] {
        let a = estimate_reward(&e, &s, t).unwrap();
        let b = estimate_reward(&e, &s, t2).unwrap();
        let tol = a.truncation_bound + 3.0 * combine(a.std_error, b.std_error);
        assert!((a.value - b.value).abs() <= tol, "T = {t}: {} vs {}", a.value, b.value);
    }
}
