//! Runs a resolved pipeline and writes `report.json`, `summary.csv` and per-stage CSVs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbsde_core::bsde::{
    dual_value_check, optimal_intensity, run_constrained_limit, BsdeSolution, DualOptions, Evaluation, LimitConfig,
    ValueCertificate,
};
use rbsde_core::hjb::{compare_value, solve_hjb_fd, GridValue, HjbOptions};
use rbsde_core::problem::{validate_problem, ModelError, Regime};
use rbsde_core::randomization::{estimate_reward, IntensityControl};
use rbsde_core::sim::{check_moment_bound, simulate_randomized_pair, SimOptions, TimeGrid};
use rbsde_core::stats::combine;
use serde::ser::Serializer;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Resolved, StageKind};
use crate::zoo::{BsdeStage, Provenance};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Relative tolerance of the BSDE against the finite-difference value.
pub const COMPARE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorBar {
    Value(f64),
    Exact,
}

impl Serialize for ErrorBar {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ErrorBar::Value(e) => s.serialize_f64(*e),
            ErrorBar::Exact => s.serialize_str("exact"),
        }
    }
}

impl std::fmt::Display for ErrorBar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ErrorBar::Value(e) => write!(f, "{e:?}"),
            ErrorBar::Exact => f.write_str("exact"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantity {
    pub name: String,
    pub value: f64,
    pub error: ErrorBar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Error,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    /// Hard verdicts decide the exit status.
    pub hard: bool,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub status: Status,
    pub quantities: Vec<Quantity>,
    pub invariants: Vec<Verdict>,
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

impl StageReport {
    fn new(stage: &str) -> Self {
        StageReport {
            stage: stage.to_string(),
            status: Status::Pass,
            quantities: Vec::new(),
            invariants: Vec::new(),
            files: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn skipped(stage: &str, why: &str) -> Self {
        let mut s = Self::new(stage);
        s.status = Status::Skipped;
        s.notes.push(why.to_string());
        s
    }

    fn errored(stage: &str, msg: String) -> Self {
        let mut s = Self::new(stage);
        s.status = Status::Error;
        s.notes.push(msg);
        s
    }

    fn push(&mut self, name: &str, value: f64, error: ErrorBar) {
        if value.is_finite() {
            self.quantities.push(Quantity { name: name.to_string(), value, error });
        } else {
            self.notes.push(format!("{name} is not finite ({value})"));
        }
    }

    fn exact(&mut self, name: &str, value: f64) {
        self.push(name, value, ErrorBar::Exact);
    }

    fn est(&mut self, name: &str, value: f64, err: f64) {
        let e = if err.is_finite() { ErrorBar::Value(err) } else { ErrorBar::Exact };
        self.push(name, value, e);
    }

    fn verdict(&mut self, name: &str, hard: bool, pass: bool, detail: String) {
        self.invariants.push(Verdict { name: name.to_string(), hard, pass, detail });
    }

    fn finish(mut self) -> Self {
        if self.status == Status::Pass && self.invariants.iter().any(|v| v.hard && !v.pass) {
            self.status = Status::Fail;
        }
        self
    }

    pub fn hard_failure(&self) -> bool {
        matches!(self.status, Status::Fail | Status::Error)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnownValueReport {
    pub value: Quantity,
    pub provenance: Provenance,
    pub oracle: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub problem: String,
    pub pipeline: Vec<String>,
    /// Seeds as decimal strings; they exceed the exactly representable range of a JSON number.
    pub seeds: [String; 2],
    pub known_value: Option<KnownValueReport>,
    pub bsde_stage: BsdeStage,
    pub stages: Vec<StageReport>,
    pub outcome: String,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        if self.stages.iter().any(StageReport::hard_failure) {
            EXIT_INVARIANT
        } else {
            EXIT_PASS
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// `stage,quantity,value,error` rows in pipeline order.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "stage,quantity,value,error")?;
        for s in &self.stages {
            for q in &s.quantities {
                writeln!(w, "{},{},{:?},{}", s.stage, q.name, q.value, q.error)?;
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct Context {
    bsde: Option<(ValueCertificate, BsdeSolution)>,
    hjb: Option<GridValue>,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, BenchError> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|source| BenchError::Io { path, source })
}

fn io_err(dir: &Path, name: &str) -> impl FnOnce(std::io::Error) -> BenchError {
    let path = dir.join(name);
    move |source| BenchError::Io { path, source }
}

fn validate_stage(r: &Resolved) -> StageReport {
    let mut st = StageReport::new("validate");
    match validate_problem(&r.spec) {
        Ok(v) => {
            if let Some(b) = &v.beta_check {
                st.exact("beta_bar", b.beta_bar);
                st.exact("c_bar", b.c_bar);
                st.exact("beta_margin", b.margin);
            }
            st.exact("value_bound", v.value_bound);
            st.exact("decay_rate", v.decay_rate);
            st.exact("lipschitz_empirical", v.lipschitz.empirical);
            st.exact("reward_worst_ratio", v.reward.worst_ratio);
            st.verdict(
                "lipschitz",
                true,
                v.lipschitz.pass,
                format!("empirical {} against declared {}", v.lipschitz.empirical, v.lipschitz.declared),
            );
            st.verdict("reward_growth", true, v.reward.pass, format!("worst ratio {}", v.reward.worst_ratio));
            st.notes.extend(v.warnings);
        }
        Err(ModelError::AssumptionViolation(msg)) => st.verdict("assumptions", true, false, msg),
        Err(e) => return StageReport::errored("validate", e.to_string()),
    }
    st.finish()
}

fn simulate_stage(r: &Resolved, dir: &Path) -> Result<StageReport, BenchError> {
    let cfg = r.simulate;
    let mut st = StageReport::new("simulate");
    let ens = match TimeGrid::with_step(cfg.horizon, r.dt).and_then(|g| {
        simulate_randomized_pair(&r.spec, &r.measure, r.a0, g, cfg.n_paths, r.seeds.simulation, SimOptions::default())
    }) {
        Ok(e) => e,
        Err(e) => return Ok(StageReport::errored("simulate", e.to_string())),
    };
    st.exact("horizon", cfg.horizon);
    st.exact("n_paths", cfg.n_paths as f64);
    st.exact("divergent_paths", ens.n_divergent() as f64);
    match check_moment_bound(&ens, 2.0, &r.spec) {
        Ok(m) => {
            let last = m.rows.last().expect("grid has nodes");
            st.est("sup_moment_p2", last.empirical, last.stderr);
            st.exact("sup_moment_p2_bound", last.bound);
            st.verdict(
                "moment_bound_p2",
                true,
                m.pass,
                match m.first_failure {
                    Some(t) => format!("first exceeded at t = {t}"),
                    None => "E[sup |X|^2] below its bound at every node".into(),
                },
            );
        }
        Err(e) => st.verdict("moment_bound_p2", true, false, e.to_string()),
    }
    match estimate_reward(&ens, &r.spec, cfg.horizon) {
        Ok(v) => {
            st.est("reward_nominal", v.value, v.std_error);
            st.exact("truncation_bound", v.truncation_bound);
        }
        Err(e) => st.notes.push(format!("reward estimate failed: {e}")),
    }
    let name = "ensemble.csv";
    let mut w = create(dir, name)?;
    ens.write_csv_head(&mut w, cfg.export_paths)
        .map_err(|e| BenchError::Io { path: dir.join(name), source: std::io::Error::other(e.to_string()) })?;
    w.flush().map_err(io_err(dir, name))?;
    st.files.push(name.into());
    Ok(st.finish())
}

fn bsde_stage(r: &Resolved, dir: &Path, ctx: &mut Context) -> Result<StageReport, BenchError> {
    let mut st = StageReport::new("solve-bsde");
    if let BsdeStage::SummaryRegression { caveat } = &r.bsde_stage {
        st.notes.push(format!("caveat: {caveat}"));
    }
    let cfg = LimitConfig {
        measure: r.measure.clone(),
        a0: r.a0,
        dt: r.dt,
        seed: r.seeds.simulation,
        options: r.options,
        sim: SimOptions::default(),
        sigma: 3.0,
    };
    let run = match run_constrained_limit(&r.spec, &r.schedule, &r.basis, r.target_tol, &cfg) {
        Ok(run) => run,
        Err(e) => return Ok(StageReport::errored("solve-bsde", e.to_string())),
    };
    let cert = run.certificate;
    let sol = run.solution;
    st.est("y0", cert.y0, cert.mc_error);
    st.exact("horizon", cert.horizon);
    st.exact("n_penalty", cert.n_penalty);
    st.exact("t_tail", cert.t_tail);
    let k = cert.stages.len();
    if k >= 2 && cert.stages[k - 2].horizon == cert.horizon {
        st.est("n_gap", cert.n_gap, combine(cert.stages[k - 1].mc_error, cert.stages[k - 2].mc_error));
    }
    st.exact("certificate_total", cert.total);
    st.exact("constraint_violation", sol.diagnostics.constraint_violation);
    st.est("k_terminal_mean", sol.diagnostics.k_terminal_mean, sol.diagnostics.k_terminal_stderr);
    st.exact("max_abs_y", sol.diagnostics.max_abs_y);
    st.exact("noise_floor", sol.diagnostics.noise_floor);
    for s in &cert.stages {
        let tag = format!("T={},n={}", s.horizon, s.n_penalty);
        st.est(&format!("y0[{tag}]"), s.y0, s.mc_error);
    }
    st.verdict(
        "monotone_in_n",
        true,
        cert.monotone_in_n,
        if cert.monotone_in_n {
            "Y0 nondecreasing in n within 3 standard errors".into()
        } else {
            cert.diagnostics.join("; ")
        },
    );
    if let Regime::Bounded { f_sup } = r.spec.regime {
        let bound = f_sup / r.spec.beta;
        let worst = cert.stages.iter().map(|s| s.max_abs_y - s.noise_floor).fold(f64::NEG_INFINITY, f64::max);
        st.verdict("bounded_y", true, worst <= bound, format!("max |Y| less noise floor {worst} against {bound}"));
    }
    if let Some(kv) = &r.known_value {
        let tol = (COMPARE_TOLERANCE * kv.value.abs()).max(cert.total + 3.0 * cert.mc_error);
        let gap = (cert.y0 - kv.value).abs();
        st.verdict("known_value", true, gap <= tol, format!("|Y0 - {}| = {gap} against {tol}", kv.value));
    }
    if r.target_tol > 0.0 {
        st.verdict("converged", false, cert.converged, format!("total {} against target {}", cert.total, r.target_tol));
    }
    for d in &cert.diagnostics {
        st.notes.push(d.clone());
    }
    for d in &sol.diagnostics.warnings {
        st.notes.push(d.clone());
    }

    let name = "stages.csv";
    let mut w = create(dir, name)?;
    cert.write_stage_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(dir, name))?;
    st.files.push(name.into());
    match optimal_intensity(&sol, r.epsilon) {
        Ok(nu) => {
            let table = nu.feedback_table().expect("optimal intensity is tabulated");
            let thin = table.thinned(table.n_nodes.div_ceil(10));
            let name = "feedback_table.csv";
            let mut w = create(dir, name)?;
            thin.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(dir, name))?;
            st.files.push(name.into());
            st.exact("nu_star_clamped_entries", table.clamped as f64);
        }
        Err(e) => st.notes.push(format!("feedback table not written: {e}")),
    }
    ctx.bsde = Some((cert, sol));
    Ok(st.finish())
}

fn hjb_stage(r: &Resolved, dir: &Path, ctx: &mut Context) -> Result<StageReport, BenchError> {
    let mut st = StageReport::new("solve-hjb");
    let grid = r.hjb_grid.as_ref().expect("checked at resolution");
    let gv = match solve_hjb_fd(&r.spec, grid, HjbOptions::default()) {
        Ok(g) => g,
        Err(e) => return Ok(StageReport::errored("solve-hjb", e.to_string())),
    };
    if let Err(e) = grid.check_contains(&r.spec.x0) {
        return Ok(StageReport::errored("solve-hjb", e.to_string()));
    }
    let u = gv.interpolate(&r.spec.x0);
    let allowance = gv.discretization_allowance(&r.spec.x0);
    st.est("u_x0", u, allowance);
    st.exact("dx", grid.dx[0]);
    st.exact("residual_sup", gv.residual_sup);
    st.exact("iterations", gv.iterations as f64);
    st.exact("max_abs_u", gv.max_abs());
    st.verdict(
        "converged",
        true,
        gv.converged,
        format!("{} policy iterations, residual {}", gv.iterations, gv.residual_sup),
    );
    st.verdict(
        "monotone_scheme",
        true,
        !gv.nonmonotone,
        if gv.nonmonotone {
            "stencil has negative off-diagonal weights".into()
        } else {
            "upwind stencil is monotone".into()
        },
    );
    if let Some(kv) = &r.known_value {
        if kv.provenance == Provenance::ClosedForm {
            let tol = 0.02 * kv.value.abs() + allowance;
            let gap = (u - kv.value).abs();
            st.verdict("known_value", true, gap <= tol, format!("|u(x0) - {}| = {gap} against {tol}", kv.value));
        }
    }
    let name = "hjb_grid.csv";
    let mut w = create(dir, name)?;
    gv.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(dir, name))?;
    st.files.push(name.into());
    ctx.hjb = Some(gv);
    Ok(st.finish())
}

fn compare_stage(r: &Resolved, ctx: &Context) -> StageReport {
    let (Some((cert, _)), Some(gv)) = (&ctx.bsde, &ctx.hjb) else {
        return StageReport::skipped("compare", "an upstream stage failed");
    };
    let mut st = StageReport::new("compare");
    let c = match compare_value(gv, cert, &r.spec.x0) {
        Ok(c) => c,
        Err(e) => return StageReport::errored("compare", e.to_string()),
    };
    st.est("pde_value", c.pde_value, c.allowance);
    st.est("bsde_value", c.bsde_value, cert.mc_error);
    st.exact("gap", c.gap);
    st.exact("relative_gap", c.relative_gap);
    st.exact("certificate_total", c.certificate_total);
    st.verdict(
        "relative_gap",
        true,
        c.relative_gap <= COMPARE_TOLERANCE,
        format!("{} against {COMPARE_TOLERANCE}", c.relative_gap),
    );
    st.verdict(
        "within_certificate",
        false,
        c.pass,
        format!("gap {} against certificate {} plus allowance {}", c.gap, c.certificate_total, c.allowance),
    );
    st.finish()
}

/// Bounded intensities drawn from the evaluation seed.
pub fn sample_intensities(n: f64, actions: &[f64], count: usize, seed: u64) -> Vec<IntensityControl> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            if i % 2 == 0 || actions.len() < 2 {
                IntensityControl::constant(n, rng.random_range(0.05..=1.0) * n)
            } else {
                let t = actions[rng.random_range(0..actions.len())];
                let high = rng.random_range(0.5..=1.0) * n;
                let low = rng.random_range(0.01..0.5) * n;
                IntensityControl::two_level(n, high, low, vec![t])
            }
            .expect("positive bound")
        })
        .collect()
}

fn invariants_stage(r: &Resolved, ctx: &Context) -> StageReport {
    let Some((_, sol)) = &ctx.bsde else {
        return StageReport::skipped("invariants", "an upstream stage failed");
    };
    let mut st = StageReport::new("invariants");
    let inv = r.invariants;
    let nus = sample_intensities(sol.n_penalty, sol.actions(), inv.samples, r.seeds.evaluation);
    let opts = DualOptions {
        epsilon: r.epsilon,
        evaluation: Evaluation::Resimulate { n_paths: inv.n_paths, seed: r.seeds.evaluation },
        sigma: inv.sigma,
    };
    let d = match dual_value_check(sol, &nus, opts) {
        Ok(d) => d,
        Err(e) => return StageReport::errored("invariants", e.to_string()),
    };
    st.est("y0", d.y0, d.y0_std_error);
    if let Some(m) = d.max_sample() {
        st.est("max_sampled_reward", m.value, m.std_error);
    }
    st.est("optimal_reward", d.optimal.value, d.optimal.std_error);
    st.est("duality_gap", d.gap, combine(d.y0_std_error, d.optimal.std_error));
    st.exact("epsilon", d.epsilon);
    st.exact("rate_floor_clamps", d.optimal.clamp_count as f64);
    st.verdict(
        "dual_upper",
        true,
        d.lower_ok,
        format!("max sampled reward {:?} against Y0 {}", d.max_sample().map(|m| m.value), d.y0),
    );
    st.verdict(
        "dual_attained",
        true,
        d.upper_ok,
        format!("reward of nu* {} against Y0 - eps {}", d.optimal.value, d.y0 - d.epsilon),
    );
    st.finish()
}

pub struct Outcome {
    pub report: Report,
    pub exit_code: i32,
    pub output_dir: PathBuf,
}

/// Runs the validation gate and then the pipeline, writing every file into the output directory.
pub fn run_experiment(r: &Resolved) -> Result<Outcome, BenchError> {
    let dir = r.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|source| BenchError::Io { path: dir.clone(), source })?;
    let mut stages = vec![validate_stage(r)];
    let gate_failed = stages[0].hard_failure();
    let mut ctx = Context::default();
    for s in &r.pipeline {
        let name = s.name();
        if gate_failed {
            stages.push(StageReport::skipped(name, "validation failed"));
            continue;
        }
        let rep = match s {
            StageKind::Simulate => simulate_stage(r, &dir)?,
            StageKind::SolveBsde => bsde_stage(r, &dir, &mut ctx)?,
            StageKind::SolveHjb => hjb_stage(r, &dir, &mut ctx)?,
            StageKind::Compare => compare_stage(r, &ctx),
            StageKind::Invariants => invariants_stage(r, &ctx),
        };
        stages.push(rep);
    }
    let mut report = Report {
        problem: r.spec.name.clone(),
        pipeline: r.pipeline.iter().map(|s| s.name().to_string()).collect(),
        seeds: [r.seeds.simulation.to_string(), r.seeds.evaluation.to_string()],
        known_value: r.known_value.as_ref().map(|k| KnownValueReport {
            value: Quantity { name: "known_value".into(), value: k.value, error: ErrorBar::Exact },
            provenance: k.provenance,
            oracle: k.oracle.to_string(),
        }),
        bsde_stage: r.bsde_stage.clone(),
        stages,
        outcome: String::new(),
    };
    let code = report.exit_code();
    report.outcome = if code == EXIT_PASS { "pass".into() } else { "invariant-failure".into() };

    let name = "report.json";
    let mut w = create(&dir, name)?;
    serde_json::to_writer_pretty(&mut w, &report)
        .map_err(std::io::Error::other)
        .and_then(|_| writeln!(w))
        .and_then(|_| w.flush())
        .map_err(io_err(&dir, name))?;
    let name = "summary.csv";
    let mut w = create(&dir, name)?;
    report.write_summary_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&dir, name))?;
    Ok(Outcome { report, exit_code: code, output_dir: dir })
}
