use std::sync::Arc;

use proptest::prelude::*;
use rbsde_core::problem::{ControlSpace, FnCoefficients, JumpMeasure, ProblemSpec, Regime};
use rbsde_core::sim::{
    check_moment_bound, simulate_controlled_paths, simulate_randomized_pair, PathEnsemble, SimOptions, TimeGrid,
};
use rbsde_core::stats::mean_stderr;

fn spec_with(drift: fn(f64, f64) -> f64, vol: fn(f64, f64) -> f64, x0: f64) -> ProblemSpec {
    let c = FnCoefficients::scalar(
        move |_, s, a| drift(s[0], a),
        move |_, s, a| vol(s[0], a),
        |_, s, _| -s[0].abs().min(1.0),
    );
    ProblemSpec::new(
        "sim",
        Arc::new(c),
        vec![x0],
        ControlSpace::finite(vec![-1.0, 0.0, 1.0]).unwrap(),
        1.0,
        Regime::Bounded { f_sup: 1.0 },
        1.0,
    )
    .unwrap()
}

fn randomized(spec: &ProblemSpec, lambda: f64, t: f64, dt: f64, n: usize, seed: u64) -> PathEnsemble {
    let m = JumpMeasure::uniform(spec.control_space.clone(), lambda).unwrap();
    simulate_randomized_pair(spec, &m, 0.0, TimeGrid::with_step(t, dt).unwrap(), n, seed, SimOptions::default())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_gives_identical_ensembles(seed in any::<u64>(), lambda in 0.5f64..8.0) {
        let spec = spec_with(|x, a| a - x, |_, _| 1.0, 0.3);
        let a = randomized(&spec, lambda, 1.0, 0.05, 64, seed);
        let b = randomized(&spec, lambda, 1.0, 0.05, 64, seed);
        for p in 0..64 {
            for k in 0..=a.grid.n_steps() {
                prop_assert_eq!(a.state(p, k)[0].to_bits(), b.state(p, k)[0].to_bits());
                prop_assert_eq!(a.control(p, k).to_bits(), b.control(p, k).to_bits());
            }
        }
    }

    #[test]
    fn actions_are_predictable(seed in any::<u64>(), lambda in 0.5f64..20.0) {
        let spec = spec_with(|x, a| a - x, |_, _| 1.0, 0.0);
        let e = randomized(&spec, lambda, 2.0, 0.1, 32, seed);
        let jumps = e.jumps().unwrap();
        for p in 0..32 {
            for k in 0..e.grid.n_steps() {
                // the action on step k is Ī at t_k, fixed before the step's noise and jumps
                prop_assert_eq!(e.control(p, k), jumps[p].action_at(e.grid.time(k)));
            }
        }
    }

    #[test]
    fn euler_step_matches_hand_recursion(seed in any::<u64>()) {
        let spec = spec_with(|x, a| a - 0.5 * x, |x, _| 0.2 + 0.1 * x.abs().min(1.0), 0.7);
        let e = randomized(&spec, 3.0, 1.0, 0.1, 16, seed);
        let dt = e.grid.dt();
        for p in 0..16 {
            let mut x = 0.7;
            for k in 0..e.grid.n_steps() {
                let a = e.control(p, k);
                let dw = e.increment(p, k)[0];
                x = x + (a - 0.5 * x) * dt + (0.2 + 0.1 * x.abs().min(1.0)) * dw;
                prop_assert!((x - e.state(p, k + 1)[0]).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}

#[test]
fn jumps_independent_of_brownian_increments() {
    let spec = spec_with(|_, a| a, |_, _| 1.0, 0.0);
    let n = 20_000;
    let e = randomized(&spec, 4.0, 1.0, 0.05, n, 11);
    let jumps = e.jumps().unwrap();
    let counts: Vec<f64> = (0..n).map(|p| jumps[p].len() as f64).collect();
    let sums: Vec<f64> = (0..n).map(|p| (0..e.grid.n_steps()).map(|k| e.increment(p, k)[0]).sum()).collect();
    let (mc, _) = mean_stderr(&counts);
    let (ms, _) = mean_stderr(&sums);
    let prod: Vec<f64> = counts.iter().zip(&sums).map(|(c, s)| (c - mc) * (s - ms)).collect();
    let (cov, se) = mean_stderr(&prod);
    assert!(cov.abs() <= 3.0 * se, "cov {cov} se {se}");
}

#[test]
fn euler_strong_error_halves_at_root_rate() {
    // dX = -X dt + 0.5 X dW; coarse Euler paths are driven by sums of the fine increments.
    let c = FnCoefficients::scalar(|_, s, _| -s[0], |_, s, _| 0.5 * s[0], |_, _, _| 0.0);
    let spec = ProblemSpec::new(
        "gbm",
        Arc::new(c),
        vec![1.0],
        ControlSpace::finite(vec![0.0]).unwrap(),
        1.0,
        Regime::Bounded { f_sup: 1.0 },
        1.0,
    )
    .unwrap();
    let fine_steps = 512;
    let n = 4000;
    let pol = |_: f64, _: &[f64]| 0.0;
    let e = simulate_controlled_paths(&spec, &pol, TimeGrid::new(1.0, fine_steps).unwrap(), n, 5).unwrap();
    let euler = |p: usize, m: usize| {
        let dt = 1.0 / (fine_steps / m) as f64;
        let mut x = 1.0;
        for j in 0..fine_steps / m {
            let dw: f64 = (0..m).map(|i| e.increment(p, j * m + i)[0]).sum();
            x += -x * dt + 0.5 * x * dw;
        }
        x
    };
    let err = |m: usize| -> f64 {
        let v: Vec<f64> = (0..n).map(|p| (euler(p, m) - e.state(p, fine_steps)[0]).powi(2)).collect();
        mean_stderr(&v).0.sqrt()
    };
    let (e8, e16, e32) = (err(8), err(16), err(32));
    assert!(e8 / e16 < 0.75, "{e8} {e16}");
    assert!(e16 / e32 < 0.75, "{e16} {e32}");
}

#[test]
fn moment_bounds_hold_for_brownian_and_ou() {
    let bm = spec_with(|_, _| 0.0, |_, _| 1.0, 0.0);
    let ou = spec_with(|x, _| -x, |_, _| 1.0, 1.0);
    for spec in [&bm, &ou] {
        let pol = |_: f64, _: &[f64]| 0.0;
        let e = simulate_controlled_paths(spec, &pol, TimeGrid::with_step(5.0, 0.01).unwrap(), 4000, 3).unwrap();
        for p in [1.0, 2.0, 4.0] {
            let r = check_moment_bound(&e, p, spec).unwrap();
            assert!(r.pass, "p = {p}: first failure at {:?}", r.first_failure);
        }
    }
}
