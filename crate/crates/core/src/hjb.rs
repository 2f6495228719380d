//! Finite-difference policy iteration for βu − sup_a[𝓛^a u + f] = 0 on a box.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bsde::ValueCertificate;
use crate::problem::{ModelError, ProblemSpec};

#[derive(Debug, Error)]
pub enum HjbError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("scheme is not monotone: {0}")]
    NonMonotone(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type HjbResult<T> = Result<T, HjbError>;

/// Interval control spaces are replaced by this many equispaced actions.
pub const INTERVAL_ACTIONS: usize = 33;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub dx: Vec<f64>,
    /// Nodes per dimension, boundary included.
    pub counts: Vec<usize>,
}

impl SpatialGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, dx: Vec<f64>) -> HjbResult<Self> {
        let dims = lo.len();
        if !(1..=2).contains(&dims) || hi.len() != dims || dx.len() != dims {
            return Err(HjbError::InvalidArgument("grid must have 1 or 2 dimensions".into()));
        }
        let mut counts = Vec::with_capacity(dims);
        let mut step = Vec::with_capacity(dims);
        for j in 0..dims {
            if !(lo[j].is_finite() && hi[j].is_finite() && lo[j] < hi[j]) {
                return Err(HjbError::InvalidArgument(format!("bad box [{}, {}]", lo[j], hi[j])));
            }
            if !(dx[j] > 0.0) {
                return Err(HjbError::InvalidArgument(format!("dx must be positive, got {}", dx[j])));
            }
            let cells = ((hi[j] - lo[j]) / dx[j]).round().max(2.0) as usize;
            counts.push(cells + 1);
            step.push((hi[j] - lo[j]) / cells as f64);
        }
        Ok(SpatialGrid { lo, hi, dx: step, counts })
    }

    pub fn uniform_1d(lo: f64, hi: f64, dx: f64) -> HjbResult<Self> {
        Self::new(vec![lo], vec![hi], vec![dx])
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    /// The 20% margin requirement around x0.
    pub fn check_contains(&self, x0: &[f64]) -> HjbResult<()> {
        if x0.len() != self.dims() {
            return Err(HjbError::InvalidArgument("x0 dimension differs from the grid".into()));
        }
        for j in 0..self.dims() {
            let margin = 0.2 * (self.hi[j] - self.lo[j]);
            if x0[j] - self.lo[j] < margin || self.hi[j] - x0[j] < margin {
                return Err(HjbError::InvalidArgument(format!(
                    "x0 = {:?} is within 20% of the box boundary in dimension {j}",
                    x0
                )));
            }
        }
        Ok(())
    }

    fn multi(&self, flat: usize) -> [usize; 2] {
        if self.dims() == 1 {
            [flat, 0]
        } else {
            [flat / self.counts[1], flat % self.counts[1]]
        }
    }

    pub fn coord(&self, flat: usize) -> Vec<f64> {
        let m = self.multi(flat);
        (0..self.dims()).map(|j| self.lo[j] + m[j] as f64 * self.dx[j]).collect()
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        let m = self.multi(flat);
        (0..self.dims()).any(|j| m[j] == 0 || m[j] + 1 == self.counts[j])
    }

    /// Coarser grid on the same box with twice the spacing, if the node count allows.
    pub fn coarsen(&self) -> Option<SpatialGrid> {
        if self.counts.iter().any(|&c| (c - 1) % 2 != 0 || c < 5) {
            return None;
        }
        Some(SpatialGrid {
            lo: self.lo.clone(),
            hi: self.hi.clone(),
            dx: self.dx.iter().map(|d| 2.0 * d).collect(),
            counts: self.counts.iter().map(|c| (c - 1) / 2 + 1).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HjbOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Use a non-monotone cross-derivative stencil instead of failing.
    pub allow_nonmonotone: bool,
    /// Also solve on the 2dx grid for an error allowance.
    pub coarse_check: bool,
}

impl Default for HjbOptions {
    fn default() -> Self {
        HjbOptions { max_iters: 200, tol: 1e-10, allow_nonmonotone: false, coarse_check: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridValue {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
    /// Maximizing action per node.
    pub policy: Vec<f64>,
    pub residual_sup: f64,
    pub iterations: usize,
    pub converged: bool,
    pub nonmonotone: bool,
    /// Mean node value after each policy evaluation.
    pub sweep_objective: Vec<f64>,
    pub actions: Vec<f64>,
    #[serde(skip)]
    pub coarse: Option<Box<GridValue>>,
}

impl GridValue {
    /// Multilinear interpolation; points outside the box are clamped to it.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let g = &self.grid;
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for j in 0..g.dims() {
            let u = ((x[j] - g.lo[j]) / g.dx[j]).clamp(0.0, (g.counts[j] - 1) as f64);
            let c = (u.floor() as usize).min(g.counts[j] - 2);
            base[j] = c;
            frac[j] = u - c as f64;
        }
        if g.dims() == 1 {
            let v0 = self.values[base[0]];
            let v1 = self.values[base[0] + 1];
            return (1.0 - frac[0]) * v0 + frac[0] * v1;
        }
        let ny = g.counts[1];
        let at = |i: usize, j: usize| self.values[i * ny + j];
        let (i, j) = (base[0], base[1]);
        let (fx, fy) = (frac[0], frac[1]);
        (1.0 - fx) * (1.0 - fy) * at(i, j)
            + fx * (1.0 - fy) * at(i + 1, j)
            + (1.0 - fx) * fy * at(i, j + 1)
            + fx * fy * at(i + 1, j + 1)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// |u_h(x) − u_{2h}(x)|, the first-order discretization allowance; zero without a coarse solve.
    pub fn discretization_allowance(&self, x: &[f64]) -> f64 {
        self.coarse.as_ref().map_or(0.0, |c| (self.interpolate(x) - c.interpolate(x)).abs())
    }

    /// Columns x1[,x2],value,action.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        if self.grid.dims() == 1 {
            writeln!(w, "x1,value,action")?;
        } else {
            writeln!(w, "x1,x2,value,action")?;
        }
        for (i, (v, a)) in self.values.iter().zip(&self.policy).enumerate() {
            for c in self.grid.coord(i) {
                write!(w, "{c},")?;
            }
            writeln!(w, "{v},{a}")?;
        }
        Ok(())
    }
}

/// Coefficients of one node's linear equation: diag·u_i − Σ w_k u_{nb_k} = f.
#[derive(Clone, Copy, Default)]
struct Stencil {
    diag: f64,
    /// (flat neighbor, weight)
    nb: [(usize, f64); 8],
    len: usize,
    rhs: f64,
}

impl Stencil {
    fn push(&mut self, idx: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        for k in 0..self.len {
            if self.nb[k].0 == idx {
                self.nb[k].1 += w;
                return;
            }
        }
        self.nb[self.len] = (idx, w);
        self.len += 1;
    }

    /// 𝓛^a u + f at the node, in difference form so constants are exact.
    fn apply(&self, u: &[f64], i: usize) -> f64 {
        let mut s = self.rhs;
        for k in 0..self.len {
            s += self.nb[k].1 * (u[self.nb[k].0] - u[i]);
        }
        s
    }

    fn close(&mut self, beta: f64) {
        self.diag = beta + (0..self.len).map(|k| self.nb[k].1).sum::<f64>();
    }
}

struct Model<'a> {
    spec: &'a ProblemSpec,
    grid: &'a SpatialGrid,
    actions: Vec<f64>,
    allow_nonmonotone: bool,
}

impl Model<'_> {
    /// Upwind stencil at interior node i for action a; flag set if non-monotone.
    fn stencil(&self, i: usize, a: f64) -> HjbResult<(Stencil, bool)> {
        let g = self.grid;
        let n = g.dims();
        let d = self.spec.dim_noise;
        let x = g.coord(i);
        let mut b = vec![0.0; n];
        let mut sig = vec![0.0; n * d];
        self.spec.drift(0.0, &x, a, &mut b);
        self.spec.diffusion(0.0, &x, a, &mut sig);
        let mut cov = [[0.0; 2]; 2];
        for r in 0..n {
            for c in 0..n {
                cov[r][c] = (0..d).map(|k| sig[r * d + k] * sig[c * d + k]).sum();
            }
        }
        let beta = self.spec.beta;
        let mut st = Stencil { diag: 0.0, rhs: self.spec.reward(0.0, &x, a), ..Default::default() };
        let stride = if n == 1 { [1, 0] } else { [g.counts[1], 1] };
        let mut nonmono = false;
        for j in 0..n {
            let h = g.dx[j];
            let (bp, bm) = (b[j].max(0.0), (-b[j]).max(0.0));
            let mut w_up = bp / h + 0.5 * cov[j][j] / (h * h);
            let mut w_dn = bm / h + 0.5 * cov[j][j] / (h * h);
            if n == 2 {
                let a12 = cov[0][1];
                let hx = g.dx[0];
                let hy = g.dx[1];
                let c = a12.abs() / (2.0 * hx * hy);
                w_up -= c;
                w_dn -= c;
                if w_up < -1e-14 || w_dn < -1e-14 {
                    nonmono = true;
                }
            }
            st.push(i + stride[j], w_up);
            st.push(i - stride[j], w_dn);
        }
        if n == 2 {
            let a12 = cov[0][1];
            let c = a12.abs() / (2.0 * g.dx[0] * g.dx[1]);
            if c > 0.0 {
                let (sx, sy) = (stride[0], stride[1]);
                if nonmono && !self.allow_nonmonotone {
                    return Err(HjbError::NonMonotone(format!(
                        "cross-diffusion dominates at x = {x:?}; use a finer or better-aspect grid, or allow the non-monotone fallback"
                    )));
                }
                if a12 > 0.0 {
                    st.push(i + sx + sy, c);
                    st.push(i - sx - sy, c);
                } else {
                    st.push(i + sx - sy, c);
                    st.push(i - sx + sy, c);
                }
            }
        }
        st.close(beta);
        Ok((st, nonmono))
    }

    fn boundary_value(&self, i: usize) -> f64 {
        let x = self.grid.coord(i);
        let best = self.actions.iter().map(|&a| self.spec.reward(0.0, &x, a)).fold(f64::NEG_INFINITY, f64::max);
        best / self.spec.beta
    }

    fn myopic(&self, i: usize) -> usize {
        let x = self.grid.coord(i);
        let mut best = 0;
        let mut bv = f64::NEG_INFINITY;
        for (k, &a) in self.actions.iter().enumerate() {
            let v = self.spec.reward(0.0, &x, a);
            if v > bv {
                bv = v;
                best = k;
            }
        }
        best
    }
}

fn actions_of(spec: &ProblemSpec) -> Vec<f64> {
    if spec.control_space.is_finite() {
        spec.control_space.discretize(0)
    } else {
        spec.control_space.discretize(INTERVAL_ACTIONS)
    }
}

/// Solves the linear system of a fixed policy as a correction to `base`;
/// `rows[i]` is None on the boundary.
fn solve_policy(grid: &SpatialGrid, rows: &[Option<Stencil>], bvals: &[f64], base: &[f64], beta: f64) -> Vec<f64> {
    let defect: Vec<f64> = (0..rows.len())
        .map(|i| match &rows[i] {
            None => bvals[i] - base[i],
            Some(st) => st.apply(base, i) - beta * base[i],
        })
        .collect();
    let delta = solve_linear(grid, rows, &defect);
    base.iter().zip(&delta).map(|(u, d)| u + d).collect()
}

fn solve_linear(grid: &SpatialGrid, rows: &[Option<Stencil>], bvals: &[f64]) -> Vec<f64> {
    let nn = grid.n_nodes();
    if grid.dims() == 1 {
        // Thomas algorithm
        let mut a = vec![0.0; nn];
        let mut b = vec![0.0; nn];
        let mut c = vec![0.0; nn];
        let mut r = vec![0.0; nn];
        for i in 0..nn {
            match &rows[i] {
                None => {
                    b[i] = 1.0;
                    r[i] = bvals[i];
                }
                Some(st) => {
                    b[i] = st.diag;
                    r[i] = bvals[i];
                    for k in 0..st.len {
                        let (j, w) = st.nb[k];
                        if j + 1 == i {
                            a[i] = -w;
                        } else {
                            c[i] = -w;
                        }
                    }
                }
            }
        }
        for i in 1..nn {
            let m = a[i] / b[i - 1];
            b[i] -= m * c[i - 1];
            r[i] -= m * r[i - 1];
        }
        let mut u = vec![0.0; nn];
        u[nn - 1] = r[nn - 1] / b[nn - 1];
        for i in (0..nn - 1).rev() {
            u[i] = (r[i] - c[i] * u[i + 1]) / b[i];
        }
        return u;
    }
    // banded LU without pivoting; the matrix is an M-matrix with strict diagonal dominance
    let bw = grid.counts[1] + 1;
    let width = 2 * bw + 1;
    let mut band = vec![0.0; nn * width];
    let mut r = vec![0.0; nn];
    let at = |i: usize, j: usize| i * width + (j + bw - i);
    for i in 0..nn {
        match &rows[i] {
            None => {
                band[at(i, i)] = 1.0;
                r[i] = bvals[i];
            }
            Some(st) => {
                band[at(i, i)] = st.diag;
                r[i] = bvals[i];
                for k in 0..st.len {
                    let (j, w) = st.nb[k];
                    band[at(i, j)] -= w;
                }
            }
        }
    }
    for k in 0..nn {
        let piv = band[at(k, k)];
        let iend = (k + bw).min(nn - 1);
        for i in k + 1..=iend {
            let l = band[at(i, k)] / piv;
            if l == 0.0 {
                continue;
            }
            band[at(i, k)] = 0.0;
            for j in k + 1..=iend.max((k + bw).min(nn - 1)) {
                let v = band[at(k, j)];
                if v != 0.0 {
                    band[at(i, j)] -= l * v;
                }
            }
            r[i] -= l * r[k];
        }
    }
    let mut u = vec![0.0; nn];
    for i in (0..nn).rev() {
        let mut s = r[i];
        for j in i + 1..=(i + bw).min(nn - 1) {
            s -= band[at(i, j)] * u[j];
        }
        u[i] = s / band[at(i, i)];
    }
    u
}

/// Policy iteration with monotone upwind differences and a myopic Dirichlet boundary.
pub fn solve_hjb_fd(spec: &ProblemSpec, grid: &SpatialGrid, opts: HjbOptions) -> HjbResult<GridValue> {
    if !spec.is_markovian() {
        return Err(HjbError::InvalidArgument("the PDE oracle needs a Markovian problem".into()));
    }
    if spec.dim_state != grid.dims() {
        return Err(HjbError::InvalidArgument(format!(
            "grid has {} dimensions, problem has {}",
            grid.dims(),
            spec.dim_state
        )));
    }
    if opts.max_iters == 0 || !(opts.tol > 0.0) {
        return Err(HjbError::InvalidArgument("need max_iters > 0 and tol > 0".into()));
    }
    let mut gv = solve_on(spec, grid, opts)?;
    if opts.coarse_check {
        if let Some(cg) = grid.coarsen() {
            gv.coarse = Some(Box::new(solve_on(spec, &cg, HjbOptions { coarse_check: false, ..opts })?));
        }
    }
    Ok(gv)
}

fn solve_on(spec: &ProblemSpec, grid: &SpatialGrid, opts: HjbOptions) -> HjbResult<GridValue> {
    let model = Model { spec, grid, actions: actions_of(spec), allow_nonmonotone: opts.allow_nonmonotone };
    let nn = grid.n_nodes();
    let na = model.actions.len();
    let bvals: Vec<f64> = (0..nn).map(|i| if grid.is_boundary(i) { model.boundary_value(i) } else { 0.0 }).collect();
    // stencils per (node, action) are reused across sweeps
    let table: Vec<Option<Vec<(Stencil, bool)>>> = (0..nn)
        .into_par_iter()
        .map(|i| {
            if grid.is_boundary(i) {
                return Ok(None);
            }
            model.actions.iter().map(|&a| model.stencil(i, a)).collect::<HjbResult<Vec<_>>>().map(Some)
        })
        .collect::<HjbResult<_>>()?;
    let nonmonotone = table.iter().flatten().flatten().any(|s| s.1);
    let mut policy: Vec<usize> = (0..nn).map(|i| model.myopic(i)).collect();
    let mut u: Vec<f64> = (0..nn)
        .map(|i| {
            let x = grid.coord(i);
            spec.reward(0.0, &x, model.actions[policy[i]]) / spec.beta
        })
        .collect();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iters {
        iterations = it + 1;
        let rows: Vec<Option<Stencil>> = (0..nn).map(|i| table[i].as_ref().map(|v| v[policy[i]].0)).collect();
        let un = solve_policy(grid, &rows, &bvals, &u, spec.beta);
        let change = un.iter().zip(&u).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        u = un;
        objective.push(u.iter().sum::<f64>() / nn as f64);
        let scale = u.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let improved: Vec<usize> = (0..nn)
            .into_par_iter()
            .map(|i| match &table[i] {
                None => policy[i],
                Some(sts) => {
                    let cur = sts[policy[i]].0.apply(&u, i);
                    let mut best = policy[i];
                    let mut bv = cur;
                    for (k, s) in sts.iter().enumerate() {
                        let v = s.0.apply(&u, i);
                        if v > bv + 1e-12 * scale.max(1.0) {
                            bv = v;
                            best = k;
                        }
                    }
                    best
                }
            })
            .collect();
        let stable = improved == policy;
        policy = improved;
        if stable || (it > 0 && change < opts.tol) {
            converged = true;
            break;
        }
    }
    let _ = na;
    let policy_actions = policy.iter().map(|&k| model.actions[k]).collect();
    let mut gv = GridValue {
        grid: grid.clone(),
        values: u,
        policy: policy_actions,
        residual_sup: 0.0,
        iterations,
        converged,
        nonmonotone,
        sweep_objective: objective,
        actions: model.actions.clone(),
        coarse: None,
    };
    gv.residual_sup = hjb_residual(&gv, spec)?;
    Ok(gv)
}

/// sup over interior nodes of |βu − max_a(𝓛^a u + f)| with the solver's stencils.
pub fn hjb_residual(grid_value: &GridValue, spec: &ProblemSpec) -> HjbResult<f64> {
    let grid = &grid_value.grid;
    let model = Model { spec, grid, actions: grid_value.actions.clone(), allow_nonmonotone: true };
    let u = &grid_value.values;
    if u.len() != grid.n_nodes() {
        return Err(HjbError::InvalidArgument("value array does not match the grid".into()));
    }
    let res = (0..grid.n_nodes())
        .into_par_iter()
        .filter(|&i| !grid.is_boundary(i))
        .map(|i| {
            let mut best = f64::NEG_INFINITY;
            for &a in &model.actions {
                let (st, _) = model.stencil(i, a)?;
                best = best.max(st.apply(u, i));
            }
            Ok((spec.beta * u[i] - best).abs())
        })
        .collect::<HjbResult<Vec<f64>>>()?;
    Ok(res.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub x0: Vec<f64>,
    pub pde_value: f64,
    pub bsde_value: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub certificate_total: f64,
    pub allowance: f64,
    pub pass: bool,
}

/// |u(x0) − Y_0| against the certificate total plus the discretization allowance.
pub fn compare_value(
    grid_value: &GridValue,
    certificate: &ValueCertificate,
    x0: &[f64],
) -> HjbResult<ComparisonReport> {
    grid_value.grid.check_contains(x0)?;
    let u = grid_value.interpolate(x0);
    let gap = (u - certificate.y0).abs();
    let allowance = grid_value.discretization_allowance(x0);
    let total =
        if certificate.total.is_finite() { certificate.total } else { certificate.mc_error + certificate.t_tail };
    Ok(ComparisonReport {
        x0: x0.to_vec(),
        pde_value: u,
        bsde_value: certificate.y0,
        gap,
        relative_gap: gap / u.abs().max(f64::MIN_POSITIVE),
        certificate_total: certificate.total,
        allowance,
        pass: gap <= total + allowance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ControlSpace, FnCoefficients, Regime};
    use std::sync::Arc;

    fn spec_1d(
        drift: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        vol: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        reward: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        actions: Vec<f64>,
    ) -> ProblemSpec {
        let c = FnCoefficients::scalar(
            move |_, s, a| drift(s[0], a),
            move |_, s, a| vol(s[0], a),
            move |_, s, a| reward(s[0], a),
        );
        ProblemSpec::new(
            "t",
            Arc::new(c),
            vec![0.0],
            ControlSpace::finite(actions).unwrap(),
            1.0,
            Regime::Bounded { f_sup: 10.0 },
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn grid_nodes_and_margin() {
        let g = SpatialGrid::uniform_1d(-1.0, 1.0, 0.5).unwrap();
        assert_eq!(g.n_nodes(), 5);
        assert_eq!(g.coord(4), vec![1.0]);
        assert!(g.is_boundary(0) && g.is_boundary(4) && !g.is_boundary(2));
        assert!(g.check_contains(&[0.0]).is_ok());
        assert!(g.check_contains(&[0.9]).is_err());
        let g2 = SpatialGrid::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(g2.counts, vec![3, 5]);
        assert_eq!(g2.coord(7), vec![0.5, 1.0]);
    }

    #[test]
    fn two_dimensional_solve_of_a_separable_problem() {
        // independent OU coordinates with f = −x² − y²: u = u1(x) + u2(y)
        let c = FnCoefficients::new(
            2,
            2,
            |_, s, _, out| {
                out[0] = -s[0];
                out[1] = -s[1];
            },
            |_, _, _, out| {
                out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            },
            |_, s, _| -(s[0] * s[0] + s[1] * s[1]),
        );
        let spec = ProblemSpec::new(
            "ou2",
            Arc::new(c),
            vec![0.0, 0.0],
            ControlSpace::finite(vec![0.0]).unwrap(),
            1.0,
            Regime::Bounded { f_sup: 50.0 },
            1.0,
        )
        .unwrap();
        let g = SpatialGrid::new(vec![-5.0, -5.0], vec![5.0, 5.0], vec![0.1, 0.1]).unwrap();
        let gv = solve_hjb_fd(&spec, &g, HjbOptions::default()).unwrap();
        // ∫ e^{−t} E[X_t² + Y_t²] dt from 0 with X0 = 0: 2 · 1/(β(β+2)) = 2/3
        let v = gv.interpolate(&[0.0, 0.0]);
        assert!((v + 2.0 / 3.0).abs() < 0.03, "{v}");
    }

    #[test]
    fn cross_diffusion_monotone_and_flagged() {
        let c = FnCoefficients::new(
            2,
            1,
            |_, _, _, out| out.fill(0.0),
            |_, _, _, out| out.copy_from_slice(&[1.0, 1.0]),
            |_, s, _| -s[0].abs(),
        );
        let spec = ProblemSpec::new(
            "x",
            Arc::new(c),
            vec![0.0, 0.0],
            ControlSpace::finite(vec![0.0]).unwrap(),
            1.0,
            Regime::Bounded { f_sup: 5.0 },
            1.0,
        )
        .unwrap();
        let g = SpatialGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![0.2, 0.2]).unwrap();
        let gv = solve_hjb_fd(&spec, &g, HjbOptions::default()).unwrap();
        assert!(!gv.nonmonotone);
        let g = SpatialGrid::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![0.1, 0.4]).unwrap();
        assert!(matches!(solve_hjb_fd(&spec, &g, HjbOptions::default()), Err(HjbError::NonMonotone(_))));
        let gv = solve_hjb_fd(&spec, &g, HjbOptions { allow_nonmonotone: true, ..Default::default() }).unwrap();
        assert!(gv.nonmonotone);
    }

    #[test]
    fn constant_reward_is_exact() {
        let spec = spec_1d(|_, a| a, |_, _| 1.0, |_, _| 1.0, vec![-1.0, 1.0]);
        let g = SpatialGrid::uniform_1d(-2.0, 2.0, 0.1).unwrap();
        let gv = solve_hjb_fd(&spec, &g, HjbOptions::default()).unwrap();
        assert!(gv.values.iter().all(|&v| v == 1.0));
        assert_eq!(hjb_residual(&gv, &spec).unwrap(), 0.0);
    }

    #[test]
    fn perturbation_shows_in_residual() {
        let spec = spec_1d(|x, _| -x, |_, _| 1.0, |x, _| -x * x, vec![0.0]);
        let g = SpatialGrid::uniform_1d(-4.0, 4.0, 0.05).unwrap();
        let mut gv = solve_hjb_fd(&spec, &g, HjbOptions::default()).unwrap();
        let r0 = gv.residual_sup;
        assert!(r0 < 1e-8);
        let delta = 1e-3;
        gv.values[80] += delta;
        let r = hjb_residual(&gv, &spec).unwrap();
        assert!(r >= spec.beta * delta - r0);
    }

    #[test]
    fn interpolation_is_linear_between_nodes() {
        let spec = spec_1d(|_, _| 0.0, |_, _| 0.0, |x, _| x, vec![0.0]);
        let g = SpatialGrid::uniform_1d(-1.0, 1.0, 0.5).unwrap();
        let gv = solve_hjb_fd(&spec, &g, HjbOptions::default()).unwrap();
        // no dynamics: u = f/β
        assert!((gv.interpolate(&[0.25]) - 0.25).abs() < 1e-12);
    }
}
