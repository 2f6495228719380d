//! Intensity controls, Doléans-Dade densities and reward estimators.

use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{JumpMeasure, ModelError, ProblemSpec};
use crate::sim::{EnsembleMode, IntensityField, JumpTrajectory, PathEnsemble, SimError, TimeGrid};
use crate::stats::{effective_sample_size, mean_stderr};

/// Rates below this are raised to it and counted.
pub const RATE_FLOOR: f64 = 1e-6;

/// Effective sample sizes below this flag the weights as degenerate.
pub const MIN_ESS: f64 = 50.0;

#[derive(Debug, Error)]
pub enum RandomizationError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type RandResult<T> = Result<T, RandomizationError>;

/// Grid-indexed intensity table over (node, state cell, current action, candidate action).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableAxis {
    /// Index of the summary feature this axis reads.
    pub feature: usize,
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

impl TableAxis {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn cell(&self, x: f64) -> usize {
        let c = ((x - self.lo) / self.width()).floor();
        if c.is_nan() || c < 0.0 {
            0
        } else {
            (c as usize).min(self.cells - 1)
        }
    }

    pub fn center(&self, c: usize) -> f64 {
        self.lo + (c as f64 + 0.5) * self.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackTable {
    pub dt: f64,
    pub n_nodes: usize,
    pub axes: Vec<TableAxis>,
    pub actions: Vec<f64>,
    /// Flattened `[node][cell][current][candidate]`.
    pub values: Vec<f64>,
    /// Entries raised to the rate floor when the table was built.
    pub clamped: u64,
}

impl FeedbackTable {
    pub fn n_cells(&self) -> usize {
        self.axes.iter().map(|a| a.cells).product()
    }

    pub fn check(&self) -> RandResult<()> {
        let m = self.actions.len();
        if self.axes.is_empty() || self.axes.iter().any(|a| a.cells == 0 || !(a.hi > a.lo)) {
            return Err(RandomizationError::InvalidArgument("table axes are malformed".into()));
        }
        if m == 0 || self.n_nodes == 0 || !(self.dt > 0.0) {
            return Err(RandomizationError::InvalidArgument("empty feedback table".into()));
        }
        if self.values.len() != self.n_nodes * self.n_cells() * m * m {
            return Err(RandomizationError::InvalidArgument("table size does not match its axes".into()));
        }
        Ok(())
    }

    pub fn cell_of(&self, s: &[f64]) -> usize {
        let mut idx = 0;
        for ax in &self.axes {
            idx = idx * ax.cells + ax.cell(s[ax.feature]);
        }
        idx
    }

    fn action_index(&self, a: f64) -> usize {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (i, &b) in self.actions.iter().enumerate() {
            let d = (a - b).abs();
            if d < dist {
                dist = d;
                best = i;
            }
        }
        best
    }

    pub fn node_of(&self, t: f64) -> usize {
        let k = (t / self.dt + 1e-9).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(self.n_nodes - 1)
        }
    }

    pub fn index(&self, k: usize, cell: usize, cur: usize, cand: usize) -> usize {
        let m = self.actions.len();
        ((k * self.n_cells() + cell) * m + cur) * m + cand
    }

    pub fn lookup(&self, t: f64, s: &[f64], current: f64, candidate: f64) -> f64 {
        let i = self.index(self.node_of(t), self.cell_of(s), self.action_index(current), self.action_index(candidate));
        self.values[i]
    }

    /// Every `stride`-th time node, for export.
    pub fn thinned(&self, stride: usize) -> FeedbackTable {
        let stride = stride.max(1);
        let per = self.n_cells() * self.actions.len() * self.actions.len();
        let nodes: Vec<usize> = (0..self.n_nodes).step_by(stride).collect();
        let mut values = Vec::with_capacity(nodes.len() * per);
        for &k in &nodes {
            values.extend_from_slice(&self.values[k * per..(k + 1) * per]);
        }
        FeedbackTable {
            dt: self.dt * stride as f64,
            n_nodes: nodes.len(),
            axes: self.axes.clone(),
            actions: self.actions.clone(),
            values,
            clamped: self.clamped,
        }
    }

    /// Columns: k, t, cell, one center per axis, current_action, candidate_action, nu.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "k,t,cell")?;
        for (i, _) in self.axes.iter().enumerate() {
            if i == 0 {
                write!(w, ",x_center")?;
            } else {
                write!(w, ",x{}_center", i + 1)?;
            }
        }
        writeln!(w, ",current_action,candidate_action,nu")?;
        let m = self.actions.len();
        let nc = self.n_cells();
        for k in 0..self.n_nodes {
            for cell in 0..nc {
                let mut rest = cell;
                let mut centers = vec![0.0; self.axes.len()];
                for (j, ax) in self.axes.iter().enumerate().rev() {
                    centers[j] = ax.center(rest % ax.cells);
                    rest /= ax.cells;
                }
                for cur in 0..m {
                    for cand in 0..m {
                        write!(w, "{},{},{}", k, k as f64 * self.dt, cell)?;
                        for c in &centers {
                            write!(w, ",{c}")?;
                        }
                        writeln!(
                            w,
                            ",{},{},{}",
                            self.actions[cur],
                            self.actions[cand],
                            self.values[self.index(k, cell, cur, cand)]
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

type RateFn = dyn Fn(f64, &[f64], f64, f64) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum IntensityKind {
    Constant(f64),
    /// `high` when the candidate is one of `targets`, `low` otherwise.
    TwoLevel {
        high: f64,
        low: f64,
        targets: Vec<f64>,
    },
    Table(Arc<FeedbackTable>),
    Custom(Arc<RateFn>),
}

impl fmt::Debug for IntensityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntensityKind::Constant(c) => write!(f, "Constant({c})"),
            IntensityKind::TwoLevel { high, low, targets } => {
                write!(f, "TwoLevel {{ high: {high}, low: {low}, targets: {targets:?} }}")
            }
            IntensityKind::Table(t) => write!(f, "Table({} nodes, {} cells)", t.n_nodes, t.n_cells()),
            IntensityKind::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A bounded positive intensity field ν ∈ V_n.
#[derive(Debug, Clone)]
pub struct IntensityControl {
    bound_n: f64,
    kind: IntensityKind,
    label: String,
    clamps: Arc<AtomicU64>,
}

impl IntensityControl {
    pub fn new(bound_n: f64, kind: IntensityKind, label: impl Into<String>) -> RandResult<Self> {
        if !(bound_n.is_finite() && bound_n > 0.0) {
            return Err(RandomizationError::InvalidArgument(format!(
                "intensity bound must be positive, got {bound_n}"
            )));
        }
        if let IntensityKind::Table(t) = &kind {
            t.check()?;
        }
        Ok(IntensityControl { bound_n, kind, label: label.into(), clamps: Arc::new(AtomicU64::new(0)) })
    }

    pub fn constant(bound_n: f64, value: f64) -> RandResult<Self> {
        Self::new(bound_n, IntensityKind::Constant(value), format!("constant({value})"))
    }

    pub fn two_level(bound_n: f64, high: f64, low: f64, targets: Vec<f64>) -> RandResult<Self> {
        let label = format!("two_level({high},{low},{targets:?})");
        Self::new(bound_n, IntensityKind::TwoLevel { high, low, targets }, label)
    }

    pub fn table(bound_n: f64, table: FeedbackTable, label: impl Into<String>) -> RandResult<Self> {
        let clamped = table.clamped;
        let c = Self::new(bound_n, IntensityKind::Table(Arc::new(table)), label)?;
        c.clamps.fetch_add(clamped, Ordering::Relaxed);
        Ok(c)
    }

    pub fn custom(
        bound_n: f64,
        label: impl Into<String>,
        f: impl Fn(f64, &[f64], f64, f64) -> f64 + Send + Sync + 'static,
    ) -> RandResult<Self> {
        Self::new(bound_n, IntensityKind::Custom(Arc::new(f)), label)
    }

    pub fn bound_n(&self) -> f64 {
        self.bound_n
    }

    pub fn kind(&self) -> &IntensityKind {
        &self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn feedback_table(&self) -> Option<&FeedbackTable> {
        match &self.kind {
            IntensityKind::Table(t) => Some(t),
            _ => None,
        }
    }

    /// Number of evaluations (and table entries) raised to the rate floor.
    pub fn clamp_count(&self) -> u64 {
        self.clamps.load(Ordering::Relaxed)
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, IntensityKind::Constant(c) if c == 1.0)
    }

    fn raw(&self, t: f64, s: &[f64], current: f64, candidate: f64) -> f64 {
        match &self.kind {
            IntensityKind::Constant(c) => *c,
            IntensityKind::TwoLevel { high, low, targets } => {
                if targets.contains(&candidate) {
                    *high
                } else {
                    *low
                }
            }
            IntensityKind::Table(tab) => tab.lookup(t, s, current, candidate),
            IntensityKind::Custom(f) => f(t, s, current, candidate),
        }
    }

    /// ν_t(a) with its admissibility check.
    pub fn rate(&self, t: f64, s: &[f64], current: f64, candidate: f64) -> RandResult<f64> {
        let v = self.raw(t, s, current, candidate);
        if !v.is_finite() || v < 0.0 || v > self.bound_n * (1.0 + 1e-12) {
            return Err(RandomizationError::ConstraintViolation(format!(
                "{}: rate {v} outside (0, {}] at t = {t}, current = {current}, candidate = {candidate}",
                self.label, self.bound_n
            )));
        }
        if v < RATE_FLOOR {
            self.clamps.fetch_add(1, Ordering::Relaxed);
            return Ok(RATE_FLOOR);
        }
        Ok(v)
    }
}

impl IntensityField for IntensityControl {
    fn bound(&self) -> f64 {
        self.bound_n
    }

    fn rate(&self, t: f64, summary: &[f64], current: f64, candidate: f64) -> Result<f64, String> {
        IntensityControl::rate(self, t, summary, current, candidate).map_err(|e| e.to_string())
    }
}

/// Monte-Carlo value with its error bars.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub std_error: f64,
    pub truncation_bound: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub excluded_divergent: usize,
    pub effective_sample_size: Option<f64>,
    pub degenerate_weights: bool,
}

/// κ_T of an intensity control along one trajectory. The rate on (t_k, t_{k+1}]
/// reads the summary at node k and the action just before each instant.
pub fn doleans_exponential<'a>(
    nu: &IntensityControl,
    jumps: &JumpTrajectory,
    grid: &TimeGrid,
    summary_at: impl Fn(usize) -> &'a [f64],
    measure: &JumpMeasure,
    t_end: f64,
) -> RandResult<f64> {
    Ok(log_doleans(nu, jumps, grid, summary_at, measure, t_end)?.exp())
}

pub fn log_doleans<'a>(
    nu: &IntensityControl,
    jumps: &JumpTrajectory,
    grid: &TimeGrid,
    summary_at: impl Fn(usize) -> &'a [f64],
    measure: &JumpMeasure,
    t_end: f64,
) -> RandResult<f64> {
    if !(t_end >= 0.0 && t_end <= grid.t_end() * (1.0 + 1e-12)) {
        return Err(RandomizationError::InvalidArgument(format!(
            "horizon {t_end} outside the grid [0, {}]",
            grid.t_end()
        )));
    }
    let nodes = measure.nodes();
    let masses = measure.masses();
    let mut log_k = 0.0;
    let mut cur = jumps.a0;
    let mut j = 0;
    for k in 0..grid.n_steps() {
        let a = grid.time(k);
        if a >= t_end {
            break;
        }
        let b = grid.time(k + 1).min(t_end);
        let s = summary_at(k);
        let mut start = a;
        loop {
            let next = (j < jumps.times.len() && jumps.times[j] <= b).then(|| jumps.times[j]);
            let end = next.unwrap_or(b);
            if end > start {
                let mut integrand = 0.0;
                for (&an, &w) in nodes.iter().zip(masses) {
                    integrand += (1.0 - nu.rate(a, s, cur, an)?) * w;
                }
                log_k += (end - start) * integrand;
            }
            match next {
                Some(tau) => {
                    let mark = jumps.marks[j];
                    log_k += nu.rate(a, s, cur, mark)?.ln();
                    cur = mark;
                    j += 1;
                    start = tau;
                }
                None => break,
            }
        }
    }
    Ok(log_k)
}

fn horizon_node(ens: &PathEnsemble, t: f64) -> RandResult<usize> {
    ens.grid.node_of(t).ok_or_else(|| {
        RandomizationError::InvalidArgument(format!(
            "horizon {t} is not a node of the ensemble grid (T = {}, dt = {})",
            ens.grid.t_end(),
            ens.grid.dt()
        ))
    })
}

/// Left-endpoint discounted reward Σ_{k<k_end} disc(k) f(t_k, s_k, a_k) dt per active path.
pub(crate) fn path_rewards(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    k_end: usize,
    disc: &(dyn Fn(usize) -> f64 + Sync),
) -> Vec<(usize, f64)> {
    let dt = ens.grid.dt();
    let active: Vec<usize> = ens.active_paths().collect();
    active
        .par_iter()
        .map(|&p| {
            let mut r = 0.0;
            for k in 0..k_end {
                r += disc(k) * spec.reward(ens.grid.time(k), ens.summary(p, k), ens.control(p, k)) * dt;
            }
            (p, r)
        })
        .collect()
}

/// J_T of the ensemble's own control, unweighted.
pub fn estimate_reward(ens: &PathEnsemble, spec: &ProblemSpec, t: f64) -> RandResult<ValueEstimate> {
    let k_end = horizon_node(ens, t)?;
    let beta = spec.beta;
    let grid = ens.grid;
    let rewards = path_rewards(ens, spec, k_end, &|k| (-beta * grid.time(k)).exp());
    let vals: Vec<f64> = rewards.iter().map(|r| r.1).collect();
    if vals.is_empty() {
        return Err(RandomizationError::InvalidArgument("no active paths".into()));
    }
    let (value, se) = mean_stderr(&vals);
    Ok(ValueEstimate {
        value,
        std_error: se,
        truncation_bound: spec.truncation_bound(t)?,
        horizon: t,
        n_paths: vals.len(),
        excluded_divergent: ens.n_divergent(),
        effective_sample_size: None,
        degenerate_weights: false,
    })
}

/// Per-path Doléans-Dade weights at horizon t.
pub fn ensemble_weights(ens: &PathEnsemble, nu: &IntensityControl, t: f64) -> RandResult<Vec<(usize, f64)>> {
    let jumps = ens
        .jumps()
        .ok_or_else(|| RandomizationError::InvalidArgument("ensemble carries no jump trajectories".into()))?;
    let measure = ens
        .measure
        .as_ref()
        .ok_or_else(|| RandomizationError::InvalidArgument("ensemble carries no jump measure".into()))?;
    let active: Vec<usize> = ens.active_paths().collect();
    active
        .par_iter()
        .map(|&p| {
            let w = if nu.is_identity() {
                1.0
            } else {
                doleans_exponential(nu, &jumps[p], &ens.grid, |k| ens.summary(p, k), measure, t)?
            };
            Ok((p, w))
        })
        .collect()
}

/// Importance-sampling estimate of J^R_T(ν) from a nominal randomized ensemble.
pub fn estimate_randomized_reward(
    ens: &PathEnsemble,
    nu: &IntensityControl,
    spec: &ProblemSpec,
    t: f64,
) -> RandResult<ValueEstimate> {
    if ens.mode != EnsembleMode::Randomized {
        return Err(RandomizationError::InvalidArgument(
            "reweighting needs an ensemble drawn under the nominal randomized measure".into(),
        ));
    }
    let k_end = horizon_node(ens, t)?;
    let beta = spec.beta;
    let grid = ens.grid;
    let weights = ensemble_weights(ens, nu, t)?;
    let rewards = path_rewards(ens, spec, k_end, &|k| (-beta * grid.time(k)).exp());
    let vals: Vec<f64> = weights.iter().zip(&rewards).map(|(w, r)| w.1 * r.1).collect();
    if vals.is_empty() {
        return Err(RandomizationError::InvalidArgument("no active paths".into()));
    }
    let ws: Vec<f64> = weights.iter().map(|w| w.1).collect();
    let ess = effective_sample_size(&ws);
    let (value, se) = mean_stderr(&vals);
    Ok(ValueEstimate {
        value,
        std_error: se,
        truncation_bound: spec.truncation_bound(t)?,
        horizon: t,
        n_paths: vals.len(),
        excluded_divergent: ens.n_divergent(),
        effective_sample_size: Some(ess),
        degenerate_weights: ess < MIN_ESS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ControlSpace;

    fn measure(lambda: f64) -> JumpMeasure {
        JumpMeasure::uniform(ControlSpace::finite(vec![0.0, 1.0]).unwrap(), lambda).unwrap()
    }

    #[test]
    fn unit_intensity_has_unit_density() {
        let g = TimeGrid::new(2.0, 20).unwrap();
        let nu = IntensityControl::constant(3.0, 1.0).unwrap();
        let tr = JumpTrajectory::new(0.0, vec![0.3, 1.25], vec![1.0, 0.0]).unwrap();
        let k = doleans_exponential(&nu, &tr, &g, |_| &[0.0][..], &measure(1.7), 2.0).unwrap();
        assert_eq!(k, 1.0);
    }

    #[test]
    fn constant_two_with_one_jump() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        let nu = IntensityControl::constant(2.0, 2.0).unwrap();
        let tr = JumpTrajectory::new(0.0, vec![0.7], vec![1.0]).unwrap();
        let k = doleans_exponential(&nu, &tr, &g, |_| &[0.0][..], &measure(1.0), 2.0).unwrap();
        assert!((k - 2.0 * (-2.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_rate_is_an_error() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let nu = IntensityControl::constant(2.0, 3.0).unwrap();
        let tr = JumpTrajectory::empty(0.0);
        let r = doleans_exponential(&nu, &tr, &g, |_| &[0.0][..], &measure(1.0), 1.0);
        assert!(matches!(r, Err(RandomizationError::ConstraintViolation(_))));
    }

    #[test]
    fn small_rates_are_clamped_and_counted() {
        let nu = IntensityControl::constant(1.0, 1e-9).unwrap();
        assert_eq!(nu.rate(0.0, &[0.0], 0.0, 1.0).unwrap(), RATE_FLOOR);
        assert_eq!(nu.rate(0.0, &[0.0], 0.0, 1.0).unwrap(), RATE_FLOOR);
        assert_eq!(nu.clamp_count(), 2);
    }

    #[test]
    fn table_lookup_and_csv() {
        let table = FeedbackTable {
            dt: 0.5,
            n_nodes: 2,
            axes: vec![TableAxis { feature: 0, lo: -1.0, hi: 1.0, cells: 2 }],
            actions: vec![0.0, 1.0],
            values: (0..16).map(|i| 1.0 + i as f64 / 16.0).collect(),
            clamped: 0,
        };
        let nu = IntensityControl::table(2.0, table.clone(), "t").unwrap();
        assert_eq!(nu.rate(0.6, &[0.5], 1.0, 0.0).unwrap(), table.values[table.index(1, 1, 1, 0)]);
        assert_eq!(nu.rate(-3.0, &[-7.0], 0.0, 0.0).unwrap(), table.values[0]);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.starts_with("k,t,cell,x_center,current_action,candidate_action,nu"));
    }
}
