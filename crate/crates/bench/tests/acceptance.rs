use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbsde_bench::experiment::sample_intensities;
use rbsde_bench::zoo::{zoo_problem, ZooProblem};
use rbsde_core::bsde::{
    dpp_residual, dual_value_check, run_constrained_limit, solve_penalized_bsde, DppOptions, DualOptions, Evaluation,
    LimitConfig, LimitRun, Schedule, SolverOptions, TauRule,
};
use rbsde_core::hjb::{solve_hjb_fd, GridValue, HjbOptions, SpatialGrid};
use rbsde_core::problem::{ControlSpace, FnCoefficients, JumpMeasure, ProblemSpec, Regime};
use rbsde_core::randomization::{ensemble_weights, IntensityControl};
use rbsde_core::sim::{check_moment_bound, simulate_controlled_paths, simulate_randomized_pair, SimOptions, TimeGrid};
use rbsde_core::stats::{combine, mean_stderr};

const SEED: u64 = 20_240_601;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn zoo(name: &str) -> ZooProblem {
    zoo_problem(name).unwrap()
}

fn limit_config(z: &ZooProblem, lambda: f64, a0: f64, seed: u64, options: SolverOptions) -> LimitConfig {
    LimitConfig {
        measure: JumpMeasure::uniform(z.spec.control_space.clone(), lambda).unwrap(),
        a0,
        dt: 0.01,
        seed,
        options,
        sim: SimOptions::default(),
        sigma: 3.0,
    }
}

fn hjb(spec: &ProblemSpec, dx: f64) -> GridValue {
    solve_hjb_fd(spec, &SpatialGrid::uniform_1d(-6.0, 6.0, dx).unwrap(), HjbOptions::default()).unwrap()
}

/// ∫₀^∞ e^{−βt} E[X_t²] dt for dX = −X dt + dW, by Simpson's rule on the exact moment.
fn ou_moment_integral(x0: f64, beta: f64) -> f64 {
    let m = |t: f64| (-beta * t).exp() * (x0 * x0 * (-2.0 * t).exp() + 0.5 * (1.0 - (-2.0 * t).exp()));
    let (t_end, n) = (60.0, 60_000);
    let h = t_end / n as f64;
    let mut s = m(0.0) + m(t_end);
    for i in 1..n {
        s += m(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let z = zoo("constant-reward");
    let (c, beta) = (1.0, z.spec.beta);
    let cfg = limit_config(&z, 16.0, z.defaults.a0, SEED, SolverOptions::default());
    let sched = Schedule { stages: vec![rbsde_core::bsde::Stage { horizon: 30.0, n_penalty: 20.0, n_paths: 10_000 }] };
    let run = run_constrained_limit(&z.spec, &sched, &z.defaults.basis, 0.0, &cfg).unwrap();
    let y0 = run.certificate.y0;
    let se = run.certificate.mc_error;
    let tol = 2.0 * (-15f64).exp() + 3.0 * se;
    let gv = hjb(&z.spec, 0.01);
    let exact_nodes = gv.values.iter().all(|&v| v == c / beta);
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: 1,
        pass: (y0 - c / beta).abs() <= tol && exact_nodes && secs < 60.0,
        detail: format!(
            "|Y0 - c/beta| = {:.3e} <= {:.3e}; HJB nodes all equal {}: {exact_nodes}; {secs:.1} s",
            (y0 - c / beta).abs(),
            tol,
            c / beta
        ),
    }
}

fn criterion_2() -> Line {
    let start = Instant::now();
    let z = zoo("bangbang-1d");
    let lambda = 4.0;
    let horizon = 1.0;
    let m = JumpMeasure::uniform(z.spec.control_space.clone(), lambda).unwrap();
    let ens = simulate_randomized_pair(
        &z.spec,
        &m,
        -1.0,
        TimeGrid::with_step(horizon, 0.01).unwrap(),
        10_000,
        SEED + 2,
        SimOptions::default(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut worst = 0.0f64;
    let mut pass = true;
    for i in 0..5 {
        let n = rng.random_range(1.0..2.0);
        let nu = match i % 3 {
            0 => IntensityControl::constant(n, rng.random_range(0.2..1.0) * n).unwrap(),
            1 => IntensityControl::two_level(n, n, rng.random_range(0.2..1.0) * n, vec![1.0]).unwrap(),
            _ => {
                let lo = rng.random_range(0.2..1.0) * n;
                IntensityControl::custom(
                    n,
                    "toward-origin",
                    move |_, s, cur, cand| {
                        if (cand - cur) * s[0] < 0.0 {
                            n
                        } else {
                            lo
                        }
                    },
                )
                .unwrap()
            }
        };
        let w: Vec<f64> = ensemble_weights(&ens, &nu, horizon).unwrap().into_iter().map(|x| x.1).collect();
        let (mean, se) = mean_stderr(&w);
        let z = (mean - 1.0).abs() / se;
        worst = worst.max(z);
        pass &= (mean - 1.0).abs() <= 3.0 * se;
    }
    let secs = start.elapsed().as_secs_f64();
    Line {
        id: 2,
        pass: pass && secs < 60.0,
        detail: format!("worst |mean kappa_T - 1| / stderr = {worst:.2} over 5 intensities; {secs:.1} s"),
    }
}

fn criterion_3() -> Line {
    let z = zoo("bangbang-1d");
    let f_sup = z.spec.f_sup().unwrap();
    let m = JumpMeasure::uniform(z.spec.control_space.clone(), 16.0).unwrap();
    let ens = Arc::new(
        simulate_randomized_pair(
            &z.spec,
            &m,
            z.defaults.a0,
            TimeGrid::with_step(10.0, 0.01).unwrap(),
            10_000,
            SEED + 4,
            SimOptions::default(),
        )
        .unwrap(),
    );
    let opts = SolverOptions { truncate_to_bounds: false, ..SolverOptions::default() };
    let sol = solve_penalized_bsde(&z.spec, ens.clone(), 20.0, &z.defaults.basis, opts).unwrap();
    let bound = f_sup / z.spec.beta + sol.diagnostics.noise_floor;
    let mut max_y = 0.0f64;
    let mut outside = 0usize;
    for p in 0..ens.n_paths {
        for k in 0..=ens.grid.n_steps() {
            let y = sol.realized_y(p, k).abs();
            max_y = max_y.max(y);
            outside += usize::from(y > bound);
        }
    }
    Line {
        id: 3,
        pass: outside == 0,
        detail: format!("max |Y| = {max_y:.4} against {bound:.4} without truncation; {outside} grid values outside"),
    }
}

struct Headline {
    bangbang: LimitRun,
    bangbang_secs: f64,
    lines: Vec<Line>,
}

fn criterion_7() -> Headline {
    let mut total_secs = 0.0;
    let mut details = Vec::new();
    let mut pass = true;
    let mut bangbang = None;
    let mut bangbang_secs = 0.0;
    for name in ["bangbang-1d", "controlled-vol-1d", "singleton-ou"] {
        let z = zoo(name);
        let start = Instant::now();
        let cfg = limit_config(&z, z.defaults.lambda_total, z.defaults.a0, SEED + 7, SolverOptions::default());
        let run = run_constrained_limit(&z.spec, &Schedule::default_schedule(), &z.defaults.basis, 0.0, &cfg).unwrap();
        let secs = start.elapsed().as_secs_f64();
        total_secs += secs;
        let (oracle, tol) = if name == "singleton-ou" {
            (-ou_moment_integral(z.spec.x0[0], z.spec.beta), 0.02)
        } else {
            (hjb(&z.spec, 0.01).interpolate(&z.spec.x0), 0.05)
        };
        let rel = (run.certificate.y0 - oracle).abs() / oracle.abs();
        pass &= rel <= tol;
        details.push(format!("{name} Y0 {:.5} vs {oracle:.5} rel {rel:.4} <= {tol}", run.certificate.y0));
        if name == "bangbang-1d" {
            bangbang_secs = secs;
            bangbang = Some(run);
        }
    }
    pass &= total_secs <= 600.0;
    Headline {
        bangbang: bangbang.unwrap(),
        bangbang_secs,
        lines: vec![Line { id: 7, pass, detail: format!("{}; {total_secs:.0} s", details.join("; ")) }],
    }
}

fn criteria_4_5_11(spec: &ProblemSpec, run: &LimitRun) -> Vec<Line> {
    let st = &run.certificate.stages;
    let mut worst = f64::INFINITY;
    let mut mono = true;
    for w in st.windows(2) {
        if w[0].horizon == w[1].horizon {
            let slack = w[1].y0 - w[0].y0 + 3.0 * combine(w[0].mc_error, w[1].mc_error);
            worst = worst.min(w[1].y0 - w[0].y0);
            mono &= slack >= 0.0;
        }
    }
    let at = |t: f64, n: f64| st.iter().find(|s| s.horizon == t && s.n_penalty == n).unwrap();
    let (a, b) = (at(10.0, 20.0), at(20.0, 20.0));
    let f_sup = spec.f_sup().unwrap();
    let beta = spec.beta;
    let tail_tol = f_sup / beta * (-10.0 * beta).exp() + 3.0 * combine(a.mc_error, b.mc_error);
    let diff = (a.y0 - b.y0).abs();
    let (c5, c20) = (at(20.0, 5.0).constraint_violation, at(20.0, 20.0).constraint_violation);
    let ys: Vec<String> = st.iter().filter(|s| s.horizon == 20.0).map(|s| format!("{:.4}", s.y0)).collect();
    vec![
        Line {
            id: 4,
            pass: mono,
            detail: format!("smallest step in n {worst:.2e}; Y0 at T = 20 over n = 2, 5, 10, 20: {}", ys.join(", ")),
        },
        Line { id: 5, pass: diff <= tail_tol, detail: format!("|Y0(10) - Y0(20)| = {diff:.2e} <= {tail_tol:.2e}") },
        Line {
            id: 11,
            pass: c20 <= 0.5 * c5,
            detail: format!("violation n = 20: {c20:.4e}, n = 5: {c5:.4e}, ratio {:.3}", c20 / c5),
        },
    ]
}

fn criterion_6(run: &LimitRun) -> Line {
    let sol = &run.solution;
    let nus = sample_intensities(sol.n_penalty, sol.actions(), 8, SEED + 6);
    let opts = DualOptions {
        epsilon: 0.05,
        evaluation: Evaluation::Resimulate { n_paths: 10_000, seed: SEED + 60 },
        sigma: 3.0,
    };
    let d = dual_value_check(sol, &nus, opts).unwrap();
    let m = d.max_sample().unwrap();
    Line {
        id: 6,
        pass: d.lower_ok && d.upper_ok,
        detail: format!(
            "Y0 {:.4} (se {:.4}); max sampled J {:.4} (se {:.4}); J(nu*) {:.4} (se {:.4})",
            d.y0, d.y0_std_error, m.value, m.std_error, d.optimal.value, d.optimal.std_error
        ),
    }
}

fn criterion_8(run: &LimitRun) -> Line {
    let z = zoo("bangbang-1d");
    let base = run.certificate.stages.iter().find(|s| s.horizon == 10.0 && s.n_penalty == 20.0).unwrap().y0;
    let tol = run.certificate.total;
    let sched = Schedule::grid(&[(10.0, 10_000)], &[10.0, 20.0]);
    let mut details = Vec::new();
    let mut pass = true;
    for (label, lambda, a0) in [
        ("lambda x2", 2.0 * z.defaults.lambda_total, z.defaults.a0),
        ("a0 flipped", z.defaults.lambda_total, -z.defaults.a0),
    ] {
        let cfg = limit_config(&z, lambda, a0, SEED + 8, SolverOptions::default());
        let v = run_constrained_limit(&z.spec, &sched, &z.defaults.basis, 0.0, &cfg).unwrap();
        let d = (v.certificate.y0 - base).abs();
        pass &= d <= tol;
        details.push(format!("{label}: |dY0| = {d:.4}"));
    }
    Line { id: 8, pass, detail: format!("{} <= certificate total {tol:.4}", details.join(", ")) }
}

fn criterion_9(run: &LimitRun) -> Line {
    let sol = &run.solution;
    let tau = TauRule::ExitBox { lo: vec![-1.0], hi: vec![1.0], cap: Some(sol.horizon() / 2.0) };
    let nus = sample_intensities(sol.n_penalty, sol.actions(), 6, SEED + 9);
    let opts = DppOptions {
        evaluation: Evaluation::Resimulate { n_paths: 10_000, seed: SEED + 90 },
        optimal_epsilon: Some(0.05),
    };
    let r = dpp_residual(sol, &tau, &nus, opts).unwrap();
    let upper = r.entries.iter().all(|e| e.residual <= 3.0 * e.std_error);
    let worst = r.entries.iter().map(|e| e.residual / e.std_error).fold(f64::NEG_INFINITY, f64::max);
    let o = r.optimal.unwrap();
    Line {
        id: 9,
        pass: upper && o.residual.abs() <= 5.0 * o.std_error,
        detail: format!(
            "max sampled residual/stderr {worst:.2} <= 3; nu* residual {:.4} (se {:.4}, {:.2} se)",
            o.residual,
            o.std_error,
            o.residual.abs() / o.std_error
        ),
    }
}

fn criterion_10() -> Line {
    let make = |name: &str, ou: bool| {
        let c = FnCoefficients::scalar(move |_, s, _| if ou { -s[0] } else { 0.0 }, |_, _, _| 1.0, |_, _, _| 0.0);
        ProblemSpec::new(
            name,
            Arc::new(c),
            vec![0.5],
            ControlSpace::finite(vec![0.0]).unwrap(),
            1.0,
            Regime::Bounded { f_sup: 1.0 },
            1.0,
        )
        .unwrap()
    };
    let mut details = Vec::new();
    let mut pass = true;
    for (spec, label) in [(make("brownian", false), "b = 0"), (make("ou", true), "OU")] {
        let pol = |_: f64, _: &[f64]| 0.0;
        let ens =
            simulate_controlled_paths(&spec, &pol, TimeGrid::with_step(5.0, 0.01).unwrap(), 10_000, SEED + 10).unwrap();
        for p in [1.0, 2.0, 4.0] {
            let r = check_moment_bound(&ens, p, &spec).unwrap();
            pass &= r.pass;
            details.push(format!("{label} p = {p}: {}", if r.pass { "ok" } else { "violated" }));
        }
    }
    Line { id: 10, pass, detail: details.join(", ") }
}

fn criterion_12() -> Line {
    let z = zoo("singleton-ou");
    let u: Vec<f64> = [0.02, 0.01, 0.005].iter().map(|&dx| hjb(&z.spec, dx).interpolate(&z.spec.x0)).collect();
    let ratio = (u[2] - u[1]).abs() / (u[1] - u[0]).abs();
    Line {
        id: 12,
        pass: (0.3..=0.7).contains(&ratio),
        detail: format!("u(x0) at dx 0.02, 0.01, 0.005: {:.6}, {:.6}, {:.6}; ratio {ratio:.3}", u[0], u[1], u[2]),
    }
}

#[test]
fn acceptance_criteria() {
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3()];
    let head = criterion_7();
    lines.extend(criteria_4_5_11(&zoo("bangbang-1d").spec, &head.bangbang));
    lines.push(criterion_6(&head.bangbang));
    lines.extend(head.lines);
    lines.push(criterion_8(&head.bangbang));
    lines.push(criterion_9(&head.bangbang));
    lines.push(criterion_10());
    lines.push(criterion_12());
    lines.sort_by_key(|l| l.id);
    let mut err = std::io::stderr().lock();
    writeln!(err, "bangbang-1d default schedule: {:.0} s", head.bangbang_secs).unwrap();
    for l in &lines {
        writeln!(err, "criterion {:>2}: {}  {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail).unwrap();
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}
