use std::sync::Arc;

use rbsde_core::hjb::{solve_hjb_fd, HjbOptions, SpatialGrid};
use rbsde_core::problem::{validate_problem, ControlSpace, FnCoefficients, JumpMeasure, ProblemSpec, Regime};
use rbsde_core::randomization::{estimate_randomized_reward, estimate_reward, IntensityControl};
use rbsde_core::sim::{check_moment_bound, simulate_controlled_paths, simulate_randomized_pair, SimOptions, TimeGrid};
use rbsde_core::stats::{combine, mean_stderr};

type Scalar = fn(f64, f64) -> f64;

fn spec(b: Scalar, s: Scalar, f: Scalar, x0: f64, actions: Vec<f64>, f_sup: f64, l: f64) -> ProblemSpec {
    let c = FnCoefficients::scalar(move |_, x, a| b(x[0], a), move |_, x, a| s(x[0], a), move |_, x, a| f(x[0], a));
    ProblemSpec::new(
        "example",
        Arc::new(c),
        vec![x0],
        ControlSpace::finite(actions).unwrap(),
        1.0,
        Regime::Bounded { f_sup },
        l,
    )
    .unwrap()
}

fn variance(xs: &[f64]) -> (f64, f64) {
    let (m, _) = mean_stderr(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    mean_stderr(&sq)
}

#[test]
fn lipschitz_probe_reports_the_linear_drift_constant() {
    let s = spec(|x, _| x, |_, _| 1.0, |x, _| -x.abs().min(1.0), 0.0, vec![0.0], 1.0, 0.0);
    let r = validate_problem(&s).unwrap();
    assert!(!r.lipschitz.pass);
    assert!((r.lipschitz.empirical - 1.0).abs() < 0.05, "{}", r.lipschitz.empirical);
}

#[test]
fn brownian_marginal_has_unit_variance() {
    let s = spec(|_, _| 0.0, |_, _| 1.0, |_, _| 0.0, 0.0, vec![0.0], 1.0, 0.0);
    let pol = |_: f64, _: &[f64]| 0.0;
    let e = simulate_controlled_paths(&s, &pol, TimeGrid::with_step(1.0, 0.01).unwrap(), 10_000, 31).unwrap();
    let k = e.grid.n_steps();
    let xs: Vec<f64> = (0..e.n_paths).map(|p| e.state(p, k)[0]).collect();
    let (v, se) = variance(&xs);
    assert!((v - 1.0).abs() <= 3.0 * se, "{v} {se}");
}

#[test]
fn uniform_marks_pass_a_chi_square_test() {
    let s = spec(|_, a| a, |_, _| 1.0, |_, _| 0.0, 0.0, vec![-1.0, 0.0, 1.0], 1.0, 0.0);
    let m = JumpMeasure::uniform(s.control_space.clone(), 3.0).unwrap();
    let e =
        simulate_randomized_pair(&s, &m, 0.0, TimeGrid::with_step(2.0, 0.05).unwrap(), 5000, 32, SimOptions::default())
            .unwrap();
    let mut counts = [0.0f64; 3];
    for j in e.jumps().unwrap() {
        for &mk in &j.marks {
            counts[(mk + 1.0).round() as usize] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let chi2: f64 = counts.iter().map(|c| (c - total / 3.0).powi(2) / (total / 3.0)).sum();
    // 99th percentile of chi-square with 2 degrees of freedom
    assert!(chi2 < 9.2103, "{chi2} from {counts:?}");
}

#[test]
fn no_jump_paths_diffuse_at_the_initial_volatility() {
    let s = spec(|_, _| 0.0, |_, a| a, |_, _| 0.0, 0.0, vec![0.0, 1.0], 1.0, 1.0);
    let (lambda, t) = (1.0, 1.0);
    let m = JumpMeasure::uniform(s.control_space.clone(), lambda).unwrap();
    let n = 10_000;
    let e = simulate_randomized_pair(&s, &m, 1.0, TimeGrid::with_step(t, 0.01).unwrap(), n, 33, SimOptions::default())
        .unwrap();
    let k = e.grid.n_steps();
    let quiet: Vec<usize> = (0..n).filter(|&p| e.jumps().unwrap()[p].times.iter().all(|&u| u > t)).collect();
    let frac = quiet.len() as f64 / n as f64;
    let p0 = (-lambda * t).exp();
    assert!((frac - p0).abs() <= 3.0 * (p0 * (1.0 - p0) / n as f64).sqrt(), "{frac}");
    let xs: Vec<f64> = quiet.iter().map(|&p| e.state(p, k)[0]).collect();
    let (v, se) = variance(&xs);
    assert!((v - t).abs() <= 3.0 * se, "{v} {se}");
}

#[test]
fn brownian_sup_moment_sits_far_below_the_bound() {
    let s = spec(|_, _| 0.0, |_, _| 1.0, |_, _| 0.0, 0.0, vec![0.0], 1.0, 1.0);
    let pol = |_: f64, _: &[f64]| 0.0;
    let e = simulate_controlled_paths(&s, &pol, TimeGrid::with_step(1.0, 0.01).unwrap(), 10_000, 34).unwrap();
    let r = check_moment_bound(&e, 2.0, &s).unwrap();
    assert!(r.pass);
    let last = r.rows.last().unwrap();
    assert!((last.t - 1.0).abs() < 1e-12);
    assert!(last.empirical < 4.0, "{}", last.empirical);
    let expected = 36.0 * 21f64.exp();
    assert!((last.bound - expected).abs() <= 1e-12 * expected, "{}", last.bound);
}

#[test]
fn geometric_growth_breaks_an_understated_constant() {
    let s = spec(|x, _| 2.0 * x, |_, _| 0.1, |_, _| 0.0, 1.0, vec![0.0], 1.0, 0.1);
    let pol = |_: f64, _: &[f64]| 0.0;
    let e = simulate_controlled_paths(&s, &pol, TimeGrid::with_step(3.0, 0.01).unwrap(), 2000, 35).unwrap();
    let r = check_moment_bound(&e, 2.0, &s).unwrap();
    assert!(!r.pass);
    assert!(r.first_failure.is_some());
}

/// ∫₀^T e^{−t} P(I_t = 1) dt on the Euler grid, for a chain started in 0 with rates up q and down r.
fn occupation(q: f64, r: f64, t_end: f64, dt: f64) -> f64 {
    let steps = (t_end / dt).round() as usize;
    (0..steps)
        .map(|k| {
            let t = k as f64 * dt;
            (-t).exp() * q / (q + r) * (1.0 - (-(q + r) * t).exp()) * dt
        })
        .sum()
}

#[test]
fn pushing_toward_the_rewarded_mark_matches_chain_occupation() {
    let s = spec(|_, _| 0.0, |_, _| 0.0, |_, a| a, 0.0, vec![0.0, 1.0], 1.0, 0.0);
    let (lambda, t, dt) = (2.0, 5.0, 0.01);
    let m = JumpMeasure::uniform(s.control_space.clone(), lambda).unwrap();
    let e =
        simulate_randomized_pair(&s, &m, 0.0, TimeGrid::with_step(t, dt).unwrap(), 10_000, 36, SimOptions::default())
            .unwrap();
    let (high, low) = (2.0, 0.5);
    let nu = IntensityControl::two_level(2.0, high, low, vec![1.0]).unwrap();
    let pushed = estimate_randomized_reward(&e, &nu, &s, t).unwrap();
    let plain = estimate_reward(&e, &s, t).unwrap();
    let half = lambda / 2.0;
    let v_pushed = occupation(high * half, low * half, t, dt);
    let v_plain = occupation(half, half, t, dt);
    assert!((pushed.value - v_pushed).abs() <= 3.0 * pushed.std_error, "{} vs {v_pushed}", pushed.value);
    assert!((plain.value - v_plain).abs() <= 3.0 * plain.std_error, "{} vs {v_plain}", plain.value);
    let gap = pushed.value - plain.value;
    assert!(gap > 0.0);
    assert!((gap - (v_pushed - v_plain)).abs() <= 3.0 * combine(pushed.std_error, plain.std_error));
}

#[test]
fn uncontrolled_ou_reward_matches_the_moment_integral() {
    let s = spec(|x, _| -x, |_, _| 1.0, |x, a| -(x * x + a * a).min(100.0), 1.0, vec![0.0], 100.0, 1.0);
    let t = 5.0;
    let pol = |_: f64, _: &[f64]| 0.0;
    let e = simulate_controlled_paths(&s, &pol, TimeGrid::with_step(t, 0.01).unwrap(), 10_000, 37).unwrap();
    let est = estimate_reward(&e, &s, t).unwrap();
    let (x0, b) = (1.0f64, 1.0f64);
    let g = |c: f64| (1.0 - (-c * t).exp()) / c;
    let exact = -(x0 * x0 * g(b + 2.0) + 0.5 * (g(b) - g(b + 2.0)));
    assert!((est.value - exact).abs() <= 3.0 * est.std_error + 0.01 * exact.abs(), "{} vs {exact}", est.value);
}

#[test]
fn deterministic_bang_bang_hjb_matches_the_travel_time_value() {
    let s = spec(|_, a| a, |_, _| 0.0, |x, _| -x.abs().min(6.0), 0.0, vec![-1.0, 1.0], 6.0, 1.0);
    let gv = solve_hjb_fd(&s, &SpatialGrid::uniform_1d(-6.0, 6.0, 0.01).unwrap(), HjbOptions::default()).unwrap();
    assert!(gv.converged);
    for x in [0.0f64, 0.5, -1.0, 2.0] {
        let exact = -(x.abs() - 1.0 + (-x.abs()).exp());
        let u = gv.interpolate(&[x]);
        assert!((u - exact).abs() <= 0.02, "x = {x}: {u} vs {exact}");
    }
}

#[test]
fn ou_hjb_matches_the_discounted_second_moment() {
    let s = spec(|x, _| -x, |_, _| 1.0, |x, _| -(x * x).min(36.0), 0.0, vec![0.0], 36.0, 1.0);
    let gv = solve_hjb_fd(&s, &SpatialGrid::uniform_1d(-6.0, 6.0, 0.01).unwrap(), HjbOptions::default()).unwrap();
    for x in [0.0f64, 0.5, 1.0] {
        let exact = -(x * x / 3.0 + 1.0 / 3.0);
        let u = gv.interpolate(&[x]);
        assert!((u - exact).abs() <= 0.01, "x = {x}: {u} vs {exact}");
    }
}
