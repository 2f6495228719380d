//! Penalized BSDE by backward regression, dual and DPP checks, and the (T, n) limit.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{JumpMeasure, ModelError, ProblemSpec, Regime};
use crate::randomization::{
    ensemble_weights, path_rewards, FeedbackTable, IntensityControl, RandomizationError, TableAxis, RATE_FLOOR,
};
use crate::regression::{fit_targets, Design, FitDiagnostics, NodeBasis, RegressionBasis, COND_LIMIT};
use crate::rng::derive_seed;
use crate::sim::{
    simulate_randomized_pair, simulate_under_intensity, EnsembleMode, PathEnsemble, SimError, SimOptions, TimeGrid,
};
use crate::stats::{combine, effective_sample_size, mean_stderr};

#[derive(Debug, Error)]
pub enum BsdeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Randomization(#[from] RandomizationError),
}

pub type BsdeResult<T> = Result<T, BsdeError>;

fn invalid<T>(msg: impl Into<String>) -> BsdeResult<T> {
    Err(BsdeError::InvalidArgument(msg.into()))
}

/// Time discretization of the −βY dt and penalty terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyScheme {
    /// Y = (1 − βdt)C + f dt + n dt ∫(C(a′) − C(a))⁺ λ(da′). Needs (β + nλ(A))dt ≤ 1.
    Explicit,
    /// As `Explicit`, with the switching probability 1 − e^{−R dt} in place of R dt,
    /// R being the total penalized rate toward better actions.
    ExponentialExplicit,
    /// Y(1 + βdt) = C + f dt + n dt ∫(Y(a′) − Y(a))⁺ λ(da′), solved exactly per state.
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub scheme: PenaltyScheme,
    /// Clamp continuation values to the analytic value bound.
    pub truncate_to_bounds: bool,
    pub compute_z: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { scheme: PenaltyScheme::ExponentialExplicit, truncate_to_bounds: true, compute_z: true }
    }
}

#[derive(Debug, Clone)]
struct NodeModel {
    basis: NodeBasis,
    /// `[action][basis]`
    cont: Vec<Vec<f64>>,
    /// `[action * d + j][basis]`
    z: Vec<Vec<f64>>,
    diag: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    /// E ∫∫ ((U)⁺)² λ(da) dt over the ensemble.
    pub constraint_violation: f64,
    pub k_terminal_mean: f64,
    pub k_terminal_stderr: f64,
    pub min_k_increment: f64,
    pub max_abs_y: f64,
    /// 10 × largest regression standard error over nodes.
    pub noise_floor: f64,
    pub regularized_nodes: usize,
    pub max_cond_estimate: f64,
    pub pathwise_mean: f64,
    pub active_paths: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Bound {
    None,
    Const(f64),
    Poly { coef: f64, r: f64, n: usize },
}

impl Bound {
    fn at(&self, s: &[f64]) -> f64 {
        match *self {
            Bound::None => f64::INFINITY,
            Bound::Const(b) => b,
            Bound::Poly { coef, r, n } => {
                let x = s[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
                coef * (1.0 + x.powf(r))
            }
        }
    }
}

/// Actions used by the quadrature and how an arbitrary action maps onto them.
#[derive(Debug, Clone)]
struct Layout {
    nodes: Vec<f64>,
    masses: Vec<f64>,
    finite: bool,
}

enum Loc {
    Node(usize),
    Between(usize, f64),
}

impl Layout {
    fn locate(&self, a: f64) -> Loc {
        if self.finite {
            let i = self.nodes.iter().position(|&b| b == a).unwrap_or_else(|| {
                let mut best = 0;
                for (i, &b) in self.nodes.iter().enumerate() {
                    if (b - a).abs() < (self.nodes[best] - a).abs() {
                        best = i;
                    }
                }
                best
            });
            return Loc::Node(i);
        }
        let m = self.nodes.len();
        if a <= self.nodes[0] {
            return Loc::Node(0);
        }
        if a >= self.nodes[m - 1] {
            return Loc::Node(m - 1);
        }
        let i = self.nodes.partition_point(|&b| b <= a) - 1;
        if self.nodes[i] == a {
            return Loc::Node(i);
        }
        let w = (a - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i]);
        Loc::Between(i, w)
    }

    fn interp(&self, row: &[f64], a: f64) -> f64 {
        match self.locate(a) {
            Loc::Node(i) => row[i],
            Loc::Between(i, w) => (1.0 - w) * row[i] + w * row[i + 1],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SchemeParams {
    scheme: PenaltyScheme,
    n: f64,
    dt: f64,
    beta: f64,
}

impl SchemeParams {
    /// Discount applied to the continuation value over one step.
    fn discount(&self) -> f64 {
        match self.scheme {
            PenaltyScheme::Implicit => 1.0 / (1.0 + self.beta * self.dt),
            _ => 1.0 - self.beta * self.dt,
        }
    }

    /// (y, penalty term) for an action with continuation `c` and reward `f`,
    /// given the continuation row and (implicit scheme) the value row at the nodes.
    fn value(&self, c: f64, f: f64, crow: &[f64], yrow: Option<&[f64]>, masses: &[f64]) -> (f64, f64) {
        let (n, dt, beta) = (self.n, self.dt, self.beta);
        match self.scheme {
            PenaltyScheme::Explicit => {
                let mut g = 0.0;
                for (&ci, &w) in crow.iter().zip(masses) {
                    if ci > c {
                        g += w * (ci - c);
                    }
                }
                let pen = n * dt * g;
                ((1.0 - beta * dt) * c + f * dt + pen, pen)
            }
            PenaltyScheme::ExponentialExplicit => {
                let mut g = 0.0;
                let mut rate = 0.0;
                for (&ci, &w) in crow.iter().zip(masses) {
                    if ci > c {
                        g += w * (ci - c);
                        rate += w;
                    }
                }
                let pen = if rate > 0.0 { (1.0 - beta * dt) * (-(-n * rate * dt).exp_m1()) / rate * g } else { 0.0 };
                ((1.0 - beta * dt) * c + f * dt + pen, pen)
            }
            PenaltyScheme::Implicit => {
                let yrow = yrow.expect("implicit scheme needs the value row");
                let r = n * dt;
                let base = c + f * dt;
                let mut order: Vec<usize> = (0..yrow.len()).collect();
                order.sort_by(|&i, &j| yrow[j].total_cmp(&yrow[i]));
                let mut num = base;
                let mut den = 1.0 + beta * dt;
                let mut y = num / den;
                for &i in &order {
                    if yrow[i] <= y {
                        break;
                    }
                    num += r * masses[i] * yrow[i];
                    den += r * masses[i];
                    y = num / den;
                }
                let mut pen = 0.0;
                for (&yi, &w) in yrow.iter().zip(masses) {
                    if yi > y {
                        pen += r * w * (yi - y);
                    }
                }
                (y, pen)
            }
        }
    }

    /// Values at all quadrature actions.
    fn row(&self, crow: &[f64], frow: &[f64], masses: &[f64], yrow: &mut [f64], pen: &mut [f64]) {
        let m = crow.len();
        match self.scheme {
            PenaltyScheme::Implicit => {
                let r = self.n * self.dt;
                let a = 1.0 + self.beta * self.dt;
                let mut done = vec![false; m];
                let mut num: Vec<f64> = (0..m).map(|j| crow[j] + frow[j] * self.dt).collect();
                let mut den = vec![a; m];
                for _ in 0..m {
                    let mut best = usize::MAX;
                    let mut bv = f64::NEG_INFINITY;
                    for j in 0..m {
                        if !done[j] {
                            let v = num[j] / den[j];
                            if v > bv || best == usize::MAX {
                                bv = v;
                                best = j;
                            }
                        }
                    }
                    done[best] = true;
                    yrow[best] = bv;
                    for j in 0..m {
                        if !done[j] {
                            num[j] += r * masses[best] * bv;
                            den[j] += r * masses[best];
                        }
                    }
                }
                for j in 0..m {
                    let mut p = 0.0;
                    for i in 0..m {
                        if yrow[i] > yrow[j] {
                            p += r * masses[i] * (yrow[i] - yrow[j]);
                        }
                    }
                    pen[j] = p;
                }
            }
            _ => {
                for j in 0..m {
                    let (y, p) = self.value(crow[j], frow[j], crow, None, masses);
                    yrow[j] = y;
                    pen[j] = p;
                }
            }
        }
    }
}

/// Penalized BSDE solution on one ensemble.
#[derive(Clone)]
pub struct BsdeSolution {
    pub spec: ProblemSpec,
    pub measure: JumpMeasure,
    pub grid: TimeGrid,
    pub n_penalty: f64,
    pub options: SolverOptions,
    pub basis: RegressionBasis,
    pub a0: f64,
    pub y0: f64,
    pub mc_error: f64,
    pub diagnostics: SolveDiagnostics,
    ensemble: Arc<PathEnsemble>,
    nodes: Vec<NodeModel>,
    layout: Layout,
    params: SchemeParams,
    bound: Bound,
    nnz_cap: usize,
}

impl std::fmt::Debug for BsdeSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BsdeSolution")
            .field("problem", &self.spec.name)
            .field("horizon", &self.grid.t_end())
            .field("n_penalty", &self.n_penalty)
            .field("y0", &self.y0)
            .field("mc_error", &self.mc_error)
            .field("diagnostics", &self.diagnostics)
            .finish()
    }
}

/// Per-evaluation scratch space.
struct Scratch {
    idx: Vec<usize>,
    w: Vec<f64>,
    crow: Vec<f64>,
    frow: Vec<f64>,
    yrow: Vec<f64>,
    pen: Vec<f64>,
}

impl BsdeSolution {
    fn scratch(&self) -> Scratch {
        let nnz = self.nodes.iter().map(|n| n.basis.row_nnz()).max().unwrap_or(1).max(self.nnz_cap);
        let m = self.layout.nodes.len();
        Scratch {
            idx: vec![0; nnz],
            w: vec![0.0; nnz],
            crow: vec![0.0; m],
            frow: vec![0.0; m],
            yrow: vec![0.0; m],
            pen: vec![0.0; m],
        }
    }

    pub fn ensemble(&self) -> &Arc<PathEnsemble> {
        &self.ensemble
    }

    pub fn horizon(&self) -> f64 {
        self.grid.t_end()
    }

    /// Quadrature actions of the value representation.
    pub fn actions(&self) -> &[f64] {
        &self.layout.nodes
    }

    pub fn discount(&self) -> f64 {
        self.params.discount()
    }

    pub fn scheme(&self) -> PenaltyScheme {
        self.params.scheme
    }

    fn crow_into(&self, k: usize, s: &[f64], sc: &mut Scratch) {
        let node = &self.nodes[k];
        let nnz = node.basis.row_nnz();
        node.basis.eval(s, &mut sc.idx[..nnz], &mut sc.w[..nnz]);
        let b = self.bound.at(s);
        for (j, coef) in node.cont.iter().enumerate() {
            let v = NodeBasis::dot(&sc.idx[..nnz], &sc.w[..nnz], coef);
            sc.crow[j] = v.clamp(-b, b);
        }
    }

    fn rows_into(&self, k: usize, s: &[f64], sc: &mut Scratch) {
        self.crow_into(k, s, sc);
        let t = self.grid.time(k);
        for (j, &a) in self.layout.nodes.iter().enumerate() {
            sc.frow[j] = self.spec.reward(t, s, a);
        }
        self.params.row(&sc.crow, &sc.frow, &self.layout.masses, &mut sc.yrow, &mut sc.pen);
    }

    /// y_k at an arbitrary action, with the penalty term applied there; rows must be filled.
    fn value_from_rows(&self, k: usize, s: &[f64], a: f64, sc: &Scratch) -> (f64, f64) {
        match self.layout.locate(a) {
            Loc::Node(i) => (sc.yrow[i], sc.pen[i]),
            Loc::Between(..) => {
                let c = self.layout.interp(&sc.crow, a);
                let f = self.spec.reward(self.grid.time(k), s, a);
                let yrow = matches!(self.params.scheme, PenaltyScheme::Implicit).then_some(&sc.yrow[..]);
                self.params.value(c, f, &sc.crow, yrow, &self.layout.masses)
            }
        }
    }

    /// Continuation values C_k(s, a) at the quadrature actions.
    pub fn continuation_row(&self, k: usize, s: &[f64]) -> Vec<f64> {
        if k >= self.nodes.len() {
            return vec![0.0; self.layout.nodes.len()];
        }
        let mut sc = self.scratch();
        self.crow_into(k, s, &mut sc);
        sc.crow
    }

    /// y_k(s, a) at the quadrature actions.
    pub fn value_row(&self, k: usize, s: &[f64]) -> Vec<f64> {
        if k >= self.nodes.len() {
            return vec![0.0; self.layout.nodes.len()];
        }
        let mut sc = self.scratch();
        self.rows_into(k, s, &mut sc);
        sc.yrow
    }

    /// y_k(s, a); zero at the terminal node.
    pub fn value_at(&self, k: usize, s: &[f64], a: f64) -> f64 {
        if k >= self.nodes.len() {
            return 0.0;
        }
        let mut sc = self.scratch();
        self.rows_into(k, s, &mut sc);
        self.value_from_rows(k, s, a, &sc).0
    }

    /// U_k(s, ·) relative to the current action: continuation differences for the
    /// explicit schemes, value differences for the implicit one.
    pub fn jump_row(&self, k: usize, s: &[f64], current: f64) -> Vec<f64> {
        let m = self.layout.nodes.len();
        if k >= self.nodes.len() {
            return vec![0.0; m];
        }
        let mut sc = self.scratch();
        self.rows_into(k, s, &mut sc);
        let (base, row) = match self.params.scheme {
            PenaltyScheme::Implicit => (self.value_from_rows(k, s, current, &sc).0, &sc.yrow),
            _ => (self.layout.interp(&sc.crow, current), &sc.crow),
        };
        row.iter().map(|v| v - base).collect()
    }

    /// Greedy action at (k, s); ties go to the lowest index.
    pub fn greedy_action(&self, k: usize, s: &[f64]) -> f64 {
        let row = self.value_row(k, s);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        self.layout.nodes[best]
    }

    /// Realized Y_{t_k} on path p.
    pub fn realized_y(&self, p: usize, k: usize) -> f64 {
        let e = &self.ensemble;
        self.value_at(k, e.summary(p, k), e.control(p, k))
    }

    /// Realized Z_{t_k} on path p (regressed on the path's current action).
    pub fn realized_z(&self, p: usize, k: usize) -> Vec<f64> {
        let d = self.spec.dim_noise;
        if k >= self.nodes.len() || self.nodes[k].z.is_empty() {
            return vec![0.0; d];
        }
        let e = &self.ensemble;
        let node = &self.nodes[k];
        let mut sc = self.scratch();
        let nnz = node.basis.row_nnz();
        node.basis.eval(e.summary(p, k), &mut sc.idx[..nnz], &mut sc.w[..nnz]);
        let a = e.control(p, k);
        (0..d)
            .map(|j| {
                let row: Vec<f64> = (0..self.layout.nodes.len())
                    .map(|i| NodeBasis::dot(&sc.idx[..nnz], &sc.w[..nnz], &node.z[i * d + j]))
                    .collect();
                self.layout.interp(&row, a)
            })
            .collect()
    }

    /// Realized U_{t_k}(a) over the quadrature actions on path p.
    pub fn realized_u(&self, p: usize, k: usize) -> Vec<f64> {
        let e = &self.ensemble;
        self.jump_row(k, e.summary(p, k), e.control(p, k))
    }

    /// Penalty increment K_{t_{k+1}} − K_{t_k} on path p.
    pub fn k_increment(&self, p: usize, k: usize) -> f64 {
        if k >= self.nodes.len() {
            return 0.0;
        }
        let e = &self.ensemble;
        let mut sc = self.scratch();
        let s = e.summary(p, k);
        self.rows_into(k, s, &mut sc);
        self.value_from_rows(k, s, e.control(p, k), &sc).1
    }

    /// Regression diagnostics of node k.
    pub fn node_diagnostics(&self, k: usize) -> Option<&FitDiagnostics> {
        self.nodes.get(k).map(|n| &n.diag)
    }
}

/// Solves the penalized BSDE backward on a nominal randomized ensemble.
pub fn solve_penalized_bsde(
    spec: &ProblemSpec,
    ensemble: Arc<PathEnsemble>,
    n_penalty: f64,
    basis: &RegressionBasis,
    options: SolverOptions,
) -> BsdeResult<BsdeSolution> {
    if !(n_penalty.is_finite() && n_penalty > 0.0) {
        return invalid(format!("penalty parameter must be positive, got {n_penalty}"));
    }
    let ens = ensemble.as_ref();
    if ens.mode != EnsembleMode::Randomized {
        return invalid("the solver needs an ensemble drawn under the nominal randomized measure");
    }
    let measure =
        ens.measure.clone().ok_or_else(|| BsdeError::InvalidArgument("ensemble has no jump measure".into()))?;
    if !measure.space().same_set(&spec.control_space) {
        return invalid("ensemble and problem use different control spaces");
    }
    if ens.summary_spec != spec.summary || ens.dim_state != spec.dim_state || ens.dim_noise != spec.dim_noise {
        return invalid("ensemble and problem disagree on dimensions or path summary");
    }
    let sd = spec.summary.dim();
    basis.check(sd).map_err(BsdeError::InvalidArgument)?;
    let grid = ens.grid;
    let dt = grid.dt();
    let kk = grid.n_steps();
    let lambda_total = measure.lambda_total();
    if options.scheme == PenaltyScheme::Explicit && (spec.beta + n_penalty * lambda_total) * dt > 1.0 {
        return invalid(format!(
            "explicit scheme is not monotone: (beta + n lambda) dt = {} > 1; use a smaller step or another scheme",
            (spec.beta + n_penalty * lambda_total) * dt
        ));
    }
    if spec.beta * dt >= 1.0 {
        return invalid("beta dt must be below 1");
    }
    let a0 = ens.jumps().and_then(|j| j.first()).map(|j| j.a0).unwrap_or(ens.control(0, 0));
    let layout = Layout {
        nodes: measure.nodes().to_vec(),
        masses: measure.masses().to_vec(),
        finite: spec.control_space.is_finite(),
    };
    let m = layout.nodes.len();
    let d = spec.dim_noise;
    let n = spec.dim_state;
    let params = SchemeParams { scheme: options.scheme, n: n_penalty, dt, beta: spec.beta };
    let bound = if !options.truncate_to_bounds {
        Bound::None
    } else {
        match spec.regime {
            Regime::Bounded { f_sup } => Bound::Const(f_sup / spec.beta),
            Regime::Polynomial { r, m: mm } => {
                let g = spec.growth()?;
                let rate = spec.decay_rate()?;
                Bound::Poly { coef: 2.0 * mm * (1.0 + g.c_bar) / rate, r, n }
            }
        }
    };

    let active: Vec<usize> = ens.active_paths().collect();
    let na = active.len();
    if na < 2 {
        return invalid("need at least two active paths");
    }
    let mut sol = BsdeSolution {
        spec: spec.clone(),
        measure: measure.clone(),
        grid,
        n_penalty,
        options,
        basis: basis.clone(),
        a0,
        y0: f64::NAN,
        mc_error: f64::NAN,
        diagnostics: SolveDiagnostics {
            constraint_violation: 0.0,
            k_terminal_mean: 0.0,
            k_terminal_stderr: 0.0,
            min_k_increment: 0.0,
            max_abs_y: 0.0,
            noise_floor: 0.0,
            regularized_nodes: 0,
            max_cond_estimate: 0.0,
            pathwise_mean: 0.0,
            active_paths: na,
            warnings: Vec::new(),
        },
        ensemble: ensemble.clone(),
        nodes: Vec::with_capacity(kk),
        layout,
        params,
        bound,
        nnz_cap: basis.prepare(sd, active.iter().map(|&p| ens.summary(p, kk))).row_nnz(),
    };

    // per-path state carried from node k+1 to node k
    let mut next_crow = vec![0.0; na * m];
    let mut next_y = vec![0.0; na];
    let mut xi = vec![0.0; na];
    let mut kt = vec![0.0; na];
    let mut cv = vec![0.0; na];
    let mut max_abs_y = 0.0f64;
    let mut min_inc = f64::INFINITY;
    let mut max_se = 0.0f64;
    let mut ridge_nodes = 0;
    let mut max_cond = 0.0f64;
    let disc = params.discount();
    let masses = sol.layout.masses.clone();
    let mut models_rev: Vec<NodeModel> = Vec::with_capacity(kk);
    let nt = m + if options.compute_z { m * d } else { 0 };
    let sdt = 1.0 / dt;
    let mut flat = vec![0.0; na * nt];
    let mut realized = vec![0.0; na * 4];

    for k in (0..kk).rev() {
        let obs: Vec<&[f64]> = active.iter().map(|&p| ens.summary(p, k)).collect();
        let nb = basis.prepare(sd, obs.iter().copied());
        let design = Design::build(&nb, &obs);
        drop(obs);
        let t = grid.time(k);
        let t1 = grid.time(k + 1);
        let next_model = models_rev.last();

        // branched targets: y_{k+1}(X^a_{k+1}, a) with the path's own increment
        flat.par_chunks_mut(nt).zip(active.par_iter()).for_each_init(
            || (sol.scratch(), vec![0.0; n], vec![0.0; n * d], vec![0.0; n], vec![0.0; sd]),
            |(sc, b, sig, xb, sb), (out, &p)| {
                let s = ens.summary(p, k);
                let dw = ens.increment(p, k);
                for (j, &a) in sol.layout.nodes.iter().enumerate() {
                    let y = match next_model {
                        None => 0.0,
                        Some(model) => {
                            spec.drift(t, s, a, b);
                            spec.diffusion(t, s, a, sig);
                            for r in 0..n {
                                let mut v = s[r] + b[r] * dt;
                                for c in 0..d {
                                    v += sig[r * d + c] * dw[c];
                                }
                                xb[r] = v;
                            }
                            let sn: &[f64] = if sd == n {
                                xb
                            } else {
                                spec.summary.advance(s, k + 1, xb, |q| ens.state(p, q), sb);
                                sb
                            };
                            eval_value(&sol, model, t1, sn, j, sc)
                        }
                    };
                    out[j] = y;
                    if options.compute_z {
                        for c in 0..d {
                            out[m + j * d + c] = y * dw[c] * sdt;
                        }
                    }
                }
            },
        );
        let targets: Vec<Vec<f64>> = (0..nt).map(|t| (0..na).map(|i| flat[i * nt + t]).collect()).collect();
        let (coeffs, diag) = fit_targets(&nb, &design, &targets);
        drop(targets);
        if diag.regularized {
            ridge_nodes += 1;
        }
        max_cond = max_cond.max(diag.cond_estimate);
        for r in diag.residual_rms.iter().take(m) {
            max_se = max_se.max(r / (na as f64).sqrt());
        }
        let (cont, z) = {
            let mut it = coeffs.into_iter();
            let cont: Vec<Vec<f64>> = it.by_ref().take(m).collect();
            (cont, it.collect())
        };
        models_rev.push(NodeModel { basis: nb, cont, z, diag });
        let model = models_rev.last().unwrap();
        let prev_model = if models_rev.len() >= 2 { Some(&models_rev[models_rev.len() - 2]) } else { None };

        // realized quantities at node k; [Y, penalty, ξ increment, violation] per path
        next_crow
            .par_chunks_mut(m)
            .zip(next_y.par_iter_mut())
            .zip(realized.par_chunks_mut(4))
            .zip(active.par_iter())
            .for_each_init(
                || sol.scratch(),
                |sc, (((crow_slot, y_slot), out), &p)| {
                    let s = ens.summary(p, k);
                    node_rows(&sol, model, t, s, sc);
                    let a = ens.control(p, k);
                    let (y, pen) = sol.value_from_rows(k, s, a, sc);
                    let c_cur = sol.layout.interp(&sc.crow, a);
                    let h = y - disc * c_cur;
                    let jump = match prev_model {
                        Some(nm) if ens.control(p, k + 1) != a => {
                            let s1 = ens.summary(p, k + 1);
                            *y_slot - value_given_crow(&sol, nm, t1, s1, a, crow_slot)
                        }
                        _ => 0.0,
                    };
                    let (base, row): (f64, &[f64]) = match sol.params.scheme {
                        PenaltyScheme::Implicit => (y, &sc.yrow),
                        _ => (c_cur, &sc.crow),
                    };
                    let mut viol = 0.0;
                    for (&v, &w) in row.iter().zip(&masses) {
                        let u = v - base;
                        if u > 0.0 {
                            viol += w * u * u;
                        }
                    }
                    crow_slot.copy_from_slice(&sc.crow);
                    *y_slot = y;
                    out.copy_from_slice(&[y, pen, h - disc * jump, viol * dt]);
                },
            );
        let dk = disc.powi(k as i32);
        for (i, r) in realized.chunks(4).enumerate() {
            xi[i] += dk * r[2];
            kt[i] += r[1];
            cv[i] += r[3];
            max_abs_y = max_abs_y.max(r[0].abs());
            min_inc = min_inc.min(r[1]);
        }
    }
    models_rev.reverse();
    sol.nodes = models_rev;

    // Y_0 through the public evaluation path so that every consumer sees the same number
    let y0 = sol.value_at(0, ens.summary(active[0], 0), a0);
    sol.y0 = y0;
    let (pm, se) = mean_stderr(&xi);
    let (kmean, kse) = mean_stderr(&kt);
    let cvm = cv.iter().sum::<f64>() / na as f64;
    let mut warnings = Vec::new();
    if ridge_nodes > 0 {
        warnings.push(format!("{ridge_nodes} nodes needed regularization (condition estimate above {COND_LIMIT:e})"));
    }
    if ens.n_divergent() > 0 {
        warnings.push(format!("{} divergent paths excluded", ens.n_divergent()));
    }
    if !spec.is_markovian() {
        warnings.push("regression on a finite path summary; its fidelity is not checked".into());
    }
    sol.mc_error = se;
    sol.diagnostics = SolveDiagnostics {
        constraint_violation: cvm,
        k_terminal_mean: kmean,
        k_terminal_stderr: kse,
        min_k_increment: if min_inc.is_finite() { min_inc } else { 0.0 },
        max_abs_y,
        noise_floor: 10.0 * max_se,
        regularized_nodes: ridge_nodes,
        max_cond_estimate: max_cond,
        pathwise_mean: pm,
        active_paths: na,
        warnings,
    };
    Ok(sol)
}

fn node_rows(sol: &BsdeSolution, model: &NodeModel, t: f64, s: &[f64], sc: &mut Scratch) {
    let nnz = model.basis.row_nnz();
    model.basis.eval(s, &mut sc.idx[..nnz], &mut sc.w[..nnz]);
    let b = sol.bound.at(s);
    for (j, coef) in model.cont.iter().enumerate() {
        sc.crow[j] = NodeBasis::dot(&sc.idx[..nnz], &sc.w[..nnz], coef).clamp(-b, b);
    }
    for (j, &a) in sol.layout.nodes.iter().enumerate() {
        sc.frow[j] = sol.spec.reward(t, s, a);
    }
    sol.params.row(&sc.crow, &sc.frow, &sol.layout.masses, &mut sc.yrow, &mut sc.pen);
}

/// y at quadrature action j from a node model.
fn eval_value(sol: &BsdeSolution, model: &NodeModel, t: f64, s: &[f64], j: usize, sc: &mut Scratch) -> f64 {
    if sol.params.scheme == PenaltyScheme::Implicit {
        node_rows(sol, model, t, s, sc);
        return sc.yrow[j];
    }
    let nnz = model.basis.row_nnz();
    model.basis.eval(s, &mut sc.idx[..nnz], &mut sc.w[..nnz]);
    let b = sol.bound.at(s);
    for (i, coef) in model.cont.iter().enumerate() {
        sc.crow[i] = NodeBasis::dot(&sc.idx[..nnz], &sc.w[..nnz], coef).clamp(-b, b);
    }
    let f = sol.spec.reward(t, s, sol.layout.nodes[j]);
    sol.params.value(sc.crow[j], f, &sc.crow, None, &sol.layout.masses).0
}

/// y at an arbitrary action from a known continuation row.
fn value_given_crow(sol: &BsdeSolution, _model: &NodeModel, t: f64, s: &[f64], a: f64, crow: &[f64]) -> f64 {
    let c = sol.layout.interp(crow, a);
    let f = sol.spec.reward(t, s, a);
    match sol.params.scheme {
        PenaltyScheme::Implicit => {
            let frow: Vec<f64> = sol.layout.nodes.iter().map(|&b| sol.spec.reward(t, s, b)).collect();
            let m = crow.len();
            let mut yrow = vec![0.0; m];
            let mut pen = vec![0.0; m];
            sol.params.row(crow, &frow, &sol.layout.masses, &mut yrow, &mut pen);
            sol.params.value(c, f, crow, Some(&yrow), &sol.layout.masses).0
        }
        _ => sol.params.value(c, f, crow, None, &sol.layout.masses).0,
    }
}

/// Feedback intensity ν^{ε}: n where U ≥ 0, ε/(Tλ(A)) where −1 ≤ U < 0 and
/// ε/(Tλ(A)|U|) where U < −1, tabulated on (node, cell, current, candidate).
pub fn optimal_intensity(solution: &BsdeSolution, epsilon: f64) -> BsdeResult<IntensityControl> {
    optimal_intensity_with(solution, epsilon, None)
}

/// Same as [`optimal_intensity`] with an explicit table resolution (cells per axis).
pub fn optimal_intensity_with(
    solution: &BsdeSolution,
    epsilon: f64,
    cells: Option<usize>,
) -> BsdeResult<IntensityControl> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return invalid(format!("epsilon must lie in (0, 1), got {epsilon}"));
    }
    let table = intensity_table(solution, epsilon, cells)?;
    Ok(IntensityControl::table(solution.n_penalty, table, format!("nu*(eps={epsilon})"))?)
}

/// Rate of the ε-optimal control at one jump value.
pub fn optimal_rate(u: f64, n: f64, epsilon: f64, horizon: f64, lambda_total: f64) -> f64 {
    let base = epsilon / (horizon * lambda_total);
    let v = if u >= 0.0 {
        n
    } else if u >= -1.0 {
        base
    } else {
        base / u.abs()
    };
    v.min(n)
}

fn table_axes(sol: &BsdeSolution, cells: Option<usize>) -> Vec<TableAxis> {
    let ens = &sol.ensemble;
    let feats: Vec<usize> = match &sol.basis {
        RegressionBasis::Tents { .. } => sol.basis.features(ens.summary_dim()),
        RegressionBasis::Polynomial { .. } => (0..ens.summary_dim().min(2)).collect(),
    };
    let feats: Vec<usize> = feats.into_iter().take(2).collect();
    let default_cells = if feats.len() == 1 { 400 } else { 60 };
    let cells = cells.unwrap_or(default_cells);
    let boxed = sol.basis.bounding_box();
    feats
        .iter()
        .enumerate()
        .map(|(j, &f)| {
            let (lo, hi) = match &boxed {
                Some((lo, hi)) if j < lo.len() => (lo[j], hi[j]),
                _ => {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    let stride = (ens.n_paths / 2000).max(1);
                    for k in (0..=ens.grid.n_steps()).step_by((ens.grid.n_steps() / 50).max(1)) {
                        for p in (0..ens.n_paths).step_by(stride) {
                            if !ens.is_divergent(p) {
                                let v = ens.summary(p, k)[f];
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                    }
                    if hi - lo < 1e-9 {
                        (lo - 1.0, hi + 1.0)
                    } else {
                        (lo, hi)
                    }
                }
            };
            TableAxis { feature: f, lo, hi, cells }
        })
        .collect()
}

fn intensity_table(sol: &BsdeSolution, epsilon: f64, cells: Option<usize>) -> BsdeResult<FeedbackTable> {
    let ens = &sol.ensemble;
    let axes = table_axes(sol, cells);
    let n_cells: usize = axes.iter().map(|a| a.cells).product();
    let m = sol.layout.nodes.len();
    let kk = sol.grid.n_steps();
    let budget = 8_000_000usize;
    let per_node = n_cells * m * m;
    let stride = (kk * per_node).div_ceil(budget).max(1);
    let n_nodes = kk.div_ceil(stride);
    let horizon = sol.grid.t_end();
    let lt = sol.measure.lambda_total();
    let n = sol.n_penalty;
    let sd = ens.summary_dim();

    let blocks: Vec<(Vec<f64>, u64)> = (0..n_nodes)
        .into_par_iter()
        .map(|q| {
            let k = q * stride;
            // features not on an axis are held at their ensemble mean at node k
            let mut mean = vec![0.0; sd];
            let mut cnt = 0.0f64;
            for p in (0..ens.n_paths).step_by((ens.n_paths / 500).max(1)) {
                if !ens.is_divergent(p) {
                    for (i, v) in ens.summary(p, k).iter().enumerate() {
                        mean[i] += v;
                    }
                    cnt += 1.0;
                }
            }
            for v in mean.iter_mut() {
                *v /= cnt.max(1.0);
            }
            let mut out = vec![0.0; per_node];
            let mut clamped = 0u64;
            let mut s = mean.clone();
            let mut sc = sol.scratch();
            for cell in 0..n_cells {
                let mut rest = cell;
                for ax in axes.iter().rev() {
                    s[ax.feature] = ax.center(rest % ax.cells);
                    rest /= ax.cells;
                }
                sol.rows_into(k, &s, &mut sc);
                let row = match sol.params.scheme {
                    PenaltyScheme::Implicit => &sc.yrow,
                    _ => &sc.crow,
                };
                for cur in 0..m {
                    for cand in 0..m {
                        let u = row[cand] - row[cur];
                        let mut v = optimal_rate(u, n, epsilon, horizon, lt);
                        if v < RATE_FLOOR {
                            v = RATE_FLOOR;
                            clamped += 1;
                        }
                        out[(cell * m + cur) * m + cand] = v;
                    }
                }
            }
            (out, clamped)
        })
        .collect();
    let mut values = Vec::with_capacity(n_nodes * per_node);
    let mut clamped = 0;
    for (b, c) in blocks {
        values.extend_from_slice(&b);
        clamped += c;
    }
    Ok(FeedbackTable {
        dt: sol.grid.dt() * stride as f64,
        n_nodes,
        axes,
        actions: sol.layout.nodes.clone(),
        values,
        clamped,
    })
}

/// How J^R(ν) is evaluated in the dual and DPP checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evaluation {
    /// Fresh paths simulated under P^ν by thinning.
    Resimulate { n_paths: usize, seed: u64 },
    /// Doléans-Dade weights on the solution's own ensemble.
    Reweight,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualEntry {
    pub label: String,
    pub value: f64,
    pub std_error: f64,
    pub effective_sample_size: Option<f64>,
    pub clamp_count: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualReport {
    pub y0: f64,
    pub y0_std_error: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub samples: Vec<DualEntry>,
    pub optimal: DualEntry,
    /// Y_0 − J^R(ν*).
    pub gap: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

impl DualReport {
    pub fn pass(&self) -> bool {
        self.lower_ok && self.upper_ok
    }

    pub fn max_sample(&self) -> Option<&DualEntry> {
        self.samples.iter().max_by(|a, b| a.value.total_cmp(&b.value))
    }
}

struct Evaluated {
    value: f64,
    se: f64,
    ess: Option<f64>,
}

/// Mean of per-path values g(ensemble, path) under P^ν.
fn evaluate_under(
    sol: &BsdeSolution,
    nu: &IntensityControl,
    eval: Evaluation,
    salt: u64,
    g: &(dyn Fn(&PathEnsemble, usize) -> f64 + Sync),
) -> BsdeResult<Evaluated> {
    match eval {
        Evaluation::Resimulate { n_paths, seed } => {
            let ens = simulate_under_intensity(
                &sol.spec,
                nu,
                &sol.measure,
                sol.a0,
                sol.grid,
                n_paths,
                derive_seed(seed, salt),
                SimOptions::default(),
            )?;
            let vals: Vec<f64> = ens.active_paths().collect::<Vec<_>>().par_iter().map(|&p| g(&ens, p)).collect();
            let (v, se) = mean_stderr(&vals);
            Ok(Evaluated { value: v, se, ess: None })
        }
        Evaluation::Reweight => {
            let ens = sol.ensemble.as_ref();
            let w = ensemble_weights(ens, nu, sol.grid.t_end())?;
            let vals: Vec<f64> = w.par_iter().map(|&(p, wt)| wt * g(ens, p)).collect();
            let ws: Vec<f64> = w.iter().map(|x| x.1).collect();
            let (v, se) = mean_stderr(&vals);
            Ok(Evaluated { value: v, se, ess: Some(effective_sample_size(&ws)) })
        }
    }
}

fn discounted_reward(sol: &BsdeSolution, ens: &PathEnsemble, p: usize, k_end: usize) -> f64 {
    let disc = sol.discount();
    let dt = sol.grid.dt();
    let mut r = 0.0;
    let mut dk = 1.0;
    for k in 0..k_end {
        r += dk * sol.spec.reward(ens.grid.time(k), ens.summary(p, k), ens.control(p, k)) * dt;
        dk *= disc;
    }
    r
}

/// Discounted reward of the whole horizon per path, with the solver's discounting.
pub fn scheme_rewards(sol: &BsdeSolution, ens: &PathEnsemble) -> Vec<f64> {
    let disc = sol.discount();
    path_rewards(ens, &sol.spec, ens.grid.n_steps(), &|k| disc.powi(k as i32)).into_iter().map(|x| x.1).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualOptions {
    pub epsilon: f64,
    pub evaluation: Evaluation,
    /// Standard-error multiplier of the tolerance.
    pub sigma: f64,
}

/// Checks sup_ν J^R(ν) ≤ Y_0 ≤ J^R(ν*) + ε on sampled controls.
pub fn dual_value_check(
    solution: &BsdeSolution,
    nu_samples: &[IntensityControl],
    opts: DualOptions,
) -> BsdeResult<DualReport> {
    for nu in nu_samples {
        if nu.bound_n() > solution.n_penalty * (1.0 + 1e-12) {
            return invalid(format!("{} is not bounded by n = {}", nu.label(), solution.n_penalty));
        }
    }
    let kk = solution.grid.n_steps();
    let y0 = solution.y0;
    let se0 = solution.mc_error;
    let g = |e: &PathEnsemble, p: usize| discounted_reward(solution, e, p, kk);
    let mut samples = Vec::with_capacity(nu_samples.len());
    let mut lower_ok = true;
    for (i, nu) in nu_samples.iter().enumerate() {
        let ev = evaluate_under(solution, nu, opts.evaluation, 1 + i as u64, &g)?;
        let ok = ev.value <= y0 + opts.sigma * combine(ev.se, se0);
        lower_ok &= ok;
        samples.push(DualEntry {
            label: nu.label().to_string(),
            value: ev.value,
            std_error: ev.se,
            effective_sample_size: ev.ess,
            clamp_count: nu.clamp_count(),
            ok,
        });
    }
    let star = optimal_intensity(solution, opts.epsilon)?;
    let ev = evaluate_under(solution, &star, opts.evaluation, 0x5eed, &g)?;
    let upper_ok = ev.value >= y0 - opts.epsilon - opts.sigma * combine(ev.se, se0);
    let optimal = DualEntry {
        label: star.label().to_string(),
        value: ev.value,
        std_error: ev.se,
        effective_sample_size: ev.ess,
        clamp_count: star.clamp_count(),
        ok: upper_ok,
    };
    Ok(DualReport {
        y0,
        y0_std_error: se0,
        epsilon: opts.epsilon,
        sigma: opts.sigma,
        gap: y0 - optimal.value,
        samples,
        optimal,
        lower_ok,
        upper_ok,
    })
}

/// E[sup_{a′} (U_t(a′))⁺)²] integrated over the solution's ensemble and horizon under `measure`.
pub fn constraint_violation(solution: &BsdeSolution, measure: &JumpMeasure) -> BsdeResult<f64> {
    if measure.nodes() != solution.actions() {
        return invalid("measure quadrature differs from the solution's actions");
    }
    let ens = solution.ensemble.as_ref();
    let dt = solution.grid.dt();
    let kk = solution.grid.n_steps();
    let active: Vec<usize> = ens.active_paths().collect();
    let per: Vec<f64> = active
        .par_iter()
        .map(|&p| {
            let mut acc = 0.0;
            for k in 0..kk {
                let u = solution.realized_u(p, k);
                for (&v, &w) in u.iter().zip(measure.masses()) {
                    if v > 0.0 {
                        acc += w * v * v * dt;
                    }
                }
            }
            acc
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Stopping rule for the DPP check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauRule {
    Deterministic {
        t: f64,
    },
    /// First grid node where the state leaves [lo, hi], optionally capped.
    ExitBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
        cap: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppEntry {
    pub label: String,
    pub residual: f64,
    pub std_error: f64,
    pub effective_sample_size: Option<f64>,
    /// Fraction of paths stopped by the cap or horizon rather than by the exit.
    pub capped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DppReport {
    pub entries: Vec<DppEntry>,
    pub optimal: Option<DppEntry>,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DppOptions {
    pub evaluation: Evaluation,
    /// When set, ν* at this ε is evaluated as well.
    pub optimal_epsilon: Option<f64>,
}

/// max over sampled ν of E^ν[Σ_{t_k<τ} D^k f dt + D^τ Y_τ] − Y_0.
pub fn dpp_residual(
    solution: &BsdeSolution,
    tau: &TauRule,
    nu_samples: &[IntensityControl],
    opts: DppOptions,
) -> BsdeResult<DppReport> {
    let grid = solution.grid;
    let kk = grid.n_steps();
    let n = solution.spec.dim_state;
    let (cap_node, exit) = match tau {
        TauRule::Deterministic { t } => {
            let k =
                grid.node_of(*t).ok_or_else(|| BsdeError::InvalidArgument(format!("tau = {t} is not a grid node")))?;
            (Some(k), None)
        }
        TauRule::ExitBox { lo, hi, cap } => {
            if lo.len() != n || hi.len() != n {
                return invalid("exit box must match the state dimension");
            }
            let c = match cap {
                Some(c) => Some(
                    grid.node_of(*c)
                        .ok_or_else(|| BsdeError::InvalidArgument(format!("cap {c} is not a grid node")))?,
                ),
                None => None,
            };
            (c, Some((lo.clone(), hi.clone())))
        }
    };
    let stop_node = |e: &PathEnsemble, p: usize| -> (usize, bool) {
        let last = cap_node.unwrap_or(kk);
        if let Some((lo, hi)) = &exit {
            for k in 0..=last {
                let x = e.state(p, k);
                if x.iter().zip(lo.iter().zip(hi)).any(|(v, (l, h))| v < l || v > h) {
                    return (k, false);
                }
            }
            (last, true)
        } else {
            (last, true)
        }
    };
    let disc = solution.discount();
    let g = |e: &PathEnsemble, p: usize| -> f64 {
        let (kt, _) = stop_node(e, p);
        let r = discounted_reward(solution, e, p, kt);
        let y = solution.value_at(kt, e.summary(p, kt), e.control(p, kt));
        r + disc.powi(kt as i32) * y
    };
    let capped = |e: &PathEnsemble| -> f64 {
        let act: Vec<usize> = e.active_paths().collect();
        let c = act.iter().filter(|&&p| stop_node(e, p).1).count();
        c as f64 / act.len().max(1) as f64
    };
    if cap_node.is_none() && exit.is_some() {
        let frac = capped(&solution.ensemble);
        if frac > 0.01 {
            return invalid(format!(
                "exit time not reached before the horizon on {:.2}% of paths; add a cap",
                100.0 * frac
            ));
        }
    }
    let y0 = solution.y0;
    let se0 = solution.mc_error;
    let capped_frac = capped(&solution.ensemble);
    let mut entries = Vec::new();
    for (i, nu) in nu_samples.iter().enumerate() {
        let ev = evaluate_under(solution, nu, opts.evaluation, 101 + i as u64, &g)?;
        entries.push(DppEntry {
            label: nu.label().to_string(),
            residual: ev.value - y0,
            std_error: combine(ev.se, se0),
            effective_sample_size: ev.ess,
            capped_fraction: capped_frac,
        });
    }
    let optimal = match opts.optimal_epsilon {
        Some(eps) => {
            let star = optimal_intensity(solution, eps)?;
            let ev = evaluate_under(solution, &star, opts.evaluation, 0xd99, &g)?;
            Some(DppEntry {
                label: star.label().to_string(),
                residual: ev.value - y0,
                std_error: combine(ev.se, se0),
                effective_sample_size: ev.ess,
                capped_fraction: capped_frac,
            })
        }
        None => None,
    };
    let max_residual = entries.iter().chain(optimal.iter()).map(|e| e.residual).fold(f64::NEG_INFINITY, f64::max);
    Ok(DppReport { entries, optimal, max_residual })
}

/// One (T, n, n_paths) stage of the limit schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub horizon: f64,
    pub n_penalty: f64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<Stage>,
}

impl Schedule {
    /// Grid over horizons × penalties with a path count per horizon.
    pub fn grid(horizons: &[(f64, usize)], penalties: &[f64]) -> Self {
        let mut stages = Vec::new();
        for &(h, np) in horizons {
            for &n in penalties {
                stages.push(Stage { horizon: h, n_penalty: n, n_paths: np });
            }
        }
        Schedule { stages }
    }

    /// T ∈ {5, 10, 20}, n ∈ {2, 5, 10, 20}, paths {10⁴, 10⁴, 2·10⁴}.
    pub fn default_schedule() -> Self {
        Self::grid(&[(5.0, 10_000), (10.0, 10_000), (20.0, 20_000)], &[2.0, 5.0, 10.0, 20.0])
    }

    pub fn check(&self) -> BsdeResult<()> {
        if self.stages.is_empty() {
            return invalid("empty schedule");
        }
        for w in self.stages.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.horizon < a.horizon || (b.horizon == a.horizon && b.n_penalty <= a.n_penalty) {
                return invalid("schedule must increase in T, and in n at fixed T");
            }
            if b.horizon == a.horizon && b.n_paths != a.n_paths {
                return invalid("stages sharing a horizon must share the path count");
            }
        }
        for s in &self.stages {
            if !(s.horizon > 0.0 && s.n_penalty > 0.0 && s.n_paths >= 2) {
                return invalid("stages need T > 0, n > 0 and at least two paths");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LimitConfig {
    pub measure: JumpMeasure,
    pub a0: f64,
    pub dt: f64,
    pub seed: u64,
    pub options: SolverOptions,
    pub sim: SimOptions,
    /// Standard-error multiplier of the monotonicity tolerance.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageResult {
    pub horizon: f64,
    pub n_penalty: f64,
    pub n_paths: usize,
    pub y0: f64,
    pub mc_error: f64,
    pub t_tail: f64,
    /// |Y_0^n − Y_0^{n′}| against the previous penalty at the same horizon.
    pub n_gap: Option<f64>,
    pub constraint_violation: f64,
    pub k_terminal_mean: f64,
    pub max_abs_y: f64,
    pub noise_floor: f64,
    /// Nondecreasing in n against the previous stage, within tolerance.
    pub monotone_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueCertificate {
    pub y0: f64,
    pub mc_error: f64,
    pub t_tail: f64,
    pub n_gap: f64,
    pub total: f64,
    pub converged: bool,
    pub monotone_in_n: bool,
    pub horizon: f64,
    pub n_penalty: f64,
    pub stages: Vec<StageResult>,
    pub diagnostics: Vec<String>,
}

impl ValueCertificate {
    /// Per-stage CSV: T, n, Y0, stderr, t_tail, n_gap, constraint_violation, K_T mean.
    pub fn write_stage_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "T,n,n_paths,Y0,stderr,t_tail,n_gap,constraint_violation,K_T_mean")?;
        for s in &self.stages {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                s.horizon,
                s.n_penalty,
                s.n_paths,
                s.y0,
                s.mc_error,
                s.t_tail,
                s.n_gap.map_or(String::new(), |g| g.to_string()),
                s.constraint_violation,
                s.k_terminal_mean
            )?;
        }
        Ok(())
    }
}

/// Certificate plus the solution of the last stage run.
pub struct LimitRun {
    pub certificate: ValueCertificate,
    pub solution: BsdeSolution,
}

pub fn solve_constrained_limit(
    spec: &ProblemSpec,
    schedule: &Schedule,
    basis: &RegressionBasis,
    target_tol: f64,
    cfg: &LimitConfig,
) -> BsdeResult<ValueCertificate> {
    Ok(run_constrained_limit(spec, schedule, basis, target_tol, cfg)?.certificate)
}

pub fn run_constrained_limit(
    spec: &ProblemSpec,
    schedule: &Schedule,
    basis: &RegressionBasis,
    target_tol: f64,
    cfg: &LimitConfig,
) -> BsdeResult<LimitRun> {
    schedule.check()?;
    let mut stages: Vec<StageResult> = Vec::new();
    let mut diagnostics = Vec::new();
    let mut last: Option<BsdeSolution> = None;
    let mut monotone = true;
    let mut converged = false;
    let mut i = 0;
    while i < schedule.stages.len() {
        let head = schedule.stages[i];
        let group: Vec<Stage> =
            schedule.stages[i..].iter().take_while(|s| s.horizon == head.horizon).copied().collect();
        i += group.len();
        last = None;
        let grid = TimeGrid::with_step(head.horizon, cfg.dt)?;
        let ens =
            Arc::new(simulate_randomized_pair(spec, &cfg.measure, cfg.a0, grid, head.n_paths, cfg.seed, cfg.sim)?);
        let t_tail = spec.tail_bound(head.horizon)?;
        for st in &group {
            let sol = solve_penalized_bsde(spec, ens.clone(), st.n_penalty, basis, cfg.options)?;
            let prev = stages.last().filter(|p| p.horizon == st.horizon);
            let n_gap = prev.map(|p| (sol.y0 - p.y0).abs());
            let monotone_ok = prev.is_none_or(|p| sol.y0 >= p.y0 - cfg.sigma * combine(sol.mc_error, p.mc_error));
            if !monotone_ok {
                monotone = false;
                diagnostics.push(format!(
                    "Y0 decreased from {:.6} (n = {}) to {:.6} (n = {}) at T = {}: regression bias suspected",
                    prev.unwrap().y0,
                    prev.unwrap().n_penalty,
                    sol.y0,
                    st.n_penalty,
                    st.horizon
                ));
            }
            stages.push(StageResult {
                horizon: st.horizon,
                n_penalty: st.n_penalty,
                n_paths: st.n_paths,
                y0: sol.y0,
                mc_error: sol.mc_error,
                t_tail,
                n_gap,
                constraint_violation: sol.diagnostics.constraint_violation,
                k_terminal_mean: sol.diagnostics.k_terminal_mean,
                max_abs_y: sol.diagnostics.max_abs_y,
                noise_floor: sol.diagnostics.noise_floor,
                monotone_ok,
            });
            last = Some(sol);
        }
        let fin = stages.last().unwrap();
        let total = fin.mc_error + fin.t_tail + fin.n_gap.unwrap_or(f64::INFINITY);
        if target_tol > 0.0 && total <= target_tol {
            converged = true;
            break;
        }
    }
    let fin = stages.last().unwrap().clone();
    let n_gap = fin.n_gap.unwrap_or(f64::INFINITY);
    let total = fin.mc_error + fin.t_tail + n_gap;
    if !converged {
        converged = total <= target_tol;
    }
    if fin.n_gap.is_none() {
        diagnostics.push("a single penalty at the final horizon gives no n-gap estimate".into());
    }
    Ok(LimitRun {
        certificate: ValueCertificate {
            y0: fin.y0,
            mc_error: fin.mc_error,
            t_tail: fin.t_tail,
            n_gap,
            total,
            converged,
            monotone_in_n: monotone,
            horizon: fin.horizon,
            n_penalty: fin.n_penalty,
            stages,
            diagnostics,
        },
        solution: last.expect("at least one stage"),
    })
}
