//! Euler-Maruyama simulation of controlled and randomized systems.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::problem::{growth_constants, norm, JumpMeasure, ModelError, ProblemSpec};
use crate::rng::{substream, StreamTag};
use crate::stats::mean_stderr;
use crate::summary::PathSummarySpec;

const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{divergent} of {n_paths} paths diverged (limit {limit})")]
    Divergence { divergent: usize, n_paths: usize, limit: usize },
    #[error("intensity constraint violated: {0}")]
    Intensity(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ensemble file: {0}")]
    Format(String),
}

pub type SimResult<T> = Result<T, SimError>;

/// Uniform grid on [0, t_end].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> SimResult<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(SimError::InvalidArgument(format!("horizon must be positive, got {t_end}")));
        }
        if n_steps == 0 {
            return Err(SimError::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(TimeGrid { t_end, n_steps, dt: t_end / n_steps as f64 })
    }

    /// Grid with the given step; `t_end` must be an integer multiple of `dt`.
    pub fn with_step(t_end: f64, dt: f64) -> SimResult<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SimError::InvalidArgument(format!("step must be positive, got {dt}")));
        }
        let n = (t_end / dt).round();
        if n < 1.0 || ((n * dt - t_end).abs() > 1e-9 * t_end.max(1.0)) {
            return Err(SimError::InvalidArgument(format!("horizon {t_end} is not a multiple of the step {dt}")));
        }
        Self::new(t_end, n as usize)
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.t_end
        } else {
            k as f64 * self.dt
        }
    }

    /// Index of the node t_k with t_k < t ≤ t_{k+1} (0 for t ≤ 0).
    pub fn step_containing(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let k = (t / self.dt).ceil() as usize;
        k.saturating_sub(1).min(self.n_steps - 1)
    }

    /// Node index of a time that lies on the grid.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        let k = k as usize;
        if (self.time(k) - t).abs() <= 1e-9 * self.t_end.max(1.0) {
            Some(k)
        } else {
            None
        }
    }
}

/// A realization of the marked point process together with its step process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpTrajectory {
    pub a0: f64,
    pub times: Vec<f64>,
    pub marks: Vec<f64>,
}

impl JumpTrajectory {
    pub fn new(a0: f64, times: Vec<f64>, marks: Vec<f64>) -> SimResult<Self> {
        if times.len() != marks.len() {
            return Err(SimError::InvalidArgument("one mark per jump time is required".into()));
        }
        if times.first().is_some_and(|&t| t <= 0.0) {
            return Err(SimError::InvalidArgument("jump times must be positive".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::InvalidArgument("jump times must be strictly increasing".into()));
        }
        Ok(JumpTrajectory { a0, times, marks })
    }

    pub fn empty(a0: f64) -> Self {
        JumpTrajectory { a0, times: Vec::new(), marks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Ī_t, right-continuous.
    pub fn action_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&s| s <= t);
        if i == 0 {
            self.a0
        } else {
            self.marks[i - 1]
        }
    }

    /// Ī_{t−}.
    pub fn action_before(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&s| s < t);
        if i == 0 {
            self.a0
        } else {
            self.marks[i - 1]
        }
    }

    /// Number of jumps in (t0, t1].
    pub fn count_in(&self, t0: f64, t1: f64) -> usize {
        self.times.partition_point(|&s| s <= t1) - self.times.partition_point(|&s| s <= t0)
    }
}

/// Rates of an intensity change, as seen by the thinning simulator.
pub trait IntensityField: Sync {
    fn bound(&self) -> f64;
    fn rate(&self, t: f64, summary: &[f64], current: f64, candidate: f64) -> Result<f64, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Feedback control.
    Controlled,
    /// Nominal randomized measure (unit intensity).
    Randomized,
    /// Randomized system simulated directly under an intensity change.
    Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Integrate exactly across jump times inside a step (Brownian bridge split).
    pub insert_jump_nodes: bool,
    pub max_divergent_fraction: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { insert_jump_nodes: false, max_divergent_fraction: 1e-3 }
    }
}

/// Node-major bundle of simulated paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub seed: u64,
    pub mode: EnsembleMode,
    pub x0: Vec<f64>,
    pub summary_spec: PathSummarySpec,
    /// Intensity measure of the randomizing process, when there is one.
    pub measure: Option<JumpMeasure>,
    pub(crate) states: Vec<f64>,
    pub(crate) increments: Vec<f64>,
    pub(crate) controls: Vec<f64>,
    pub(crate) summaries: Option<Vec<f64>>,
    pub(crate) jumps: Option<Vec<JumpTrajectory>>,
    pub(crate) divergent: Vec<bool>,
}

impl PathEnsemble {
    pub fn state(&self, p: usize, k: usize) -> &[f64] {
        let n = self.dim_state;
        let o = (k * self.n_paths + p) * n;
        &self.states[o..o + n]
    }

    pub fn increment(&self, p: usize, k: usize) -> &[f64] {
        let d = self.dim_noise;
        let o = (k * self.n_paths + p) * d;
        &self.increments[o..o + d]
    }

    /// Action in force on step k (k = n_steps gives the terminal action).
    pub fn control(&self, p: usize, k: usize) -> f64 {
        self.controls[k * self.n_paths + p]
    }

    pub fn summary(&self, p: usize, k: usize) -> &[f64] {
        match &self.summaries {
            None => self.state(p, k),
            Some(s) => {
                let m = self.summary_spec.dim();
                let o = (k * self.n_paths + p) * m;
                &s[o..o + m]
            }
        }
    }

    pub fn summary_dim(&self) -> usize {
        self.summary_spec.dim()
    }

    pub fn jumps(&self) -> Option<&[JumpTrajectory]> {
        self.jumps.as_deref()
    }

    pub fn is_divergent(&self, p: usize) -> bool {
        self.divergent[p]
    }

    pub fn n_divergent(&self) -> usize {
        self.divergent.iter().filter(|&&d| d).count()
    }

    pub fn active_paths(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths).filter(move |&p| !self.divergent[p])
    }

    pub fn jump_flag(&self, p: usize, k: usize) -> bool {
        match (&self.jumps, k) {
            (Some(j), k) if k > 0 => j[p].count_in(self.grid.time(k - 1), self.grid.time(k)) > 0,
            _ => false,
        }
    }

    /// Bytes held by the path arrays.
    pub fn memory_bytes(&self) -> usize {
        8 * (self.states.len()
            + self.increments.len()
            + self.controls.len()
            + self.summaries.as_ref().map_or(0, |s| s.len()))
    }
}

/// Draws one trajectory of the marked point process on (0, t_end].
pub fn simulate_marked_point_process(
    measure: &JumpMeasure,
    a0: f64,
    t_end: f64,
    seed: u64,
    path: u64,
) -> SimResult<JumpTrajectory> {
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(SimError::InvalidArgument(format!("bad horizon {t_end}")));
    }
    let mut rng = substream(seed, path, StreamTag::Jumps);
    Ok(draw_jumps(measure, a0, t_end, &mut rng))
}

fn draw_jumps(measure: &JumpMeasure, a0: f64, t_end: f64, rng: &mut ChaCha8Rng) -> JumpTrajectory {
    let rate = measure.lambda_total();
    let mut t = 0.0;
    let mut times = Vec::new();
    let mut marks = Vec::new();
    loop {
        let e: f64 = Exp1.sample(rng);
        t += e / rate;
        if t > t_end {
            break;
        }
        times.push(t);
        marks.push(measure.sample_mark(rng));
    }
    JumpTrajectory { a0, times, marks }
}

pub type Policy<'a> = &'a (dyn Fn(f64, &[f64]) -> f64 + Sync);

enum Mode<'a> {
    Policy(Policy<'a>),
    Prejumped { measure: &'a JumpMeasure, a0: f64 },
    Thinning { field: &'a dyn IntensityField, measure: &'a JumpMeasure, a0: f64 },
}

struct Walker {
    bm: ChaCha8Rng,
    aux: Option<ChaCha8Rng>,
    bridge: Option<ChaCha8Rng>,
    current: f64,
    times: Vec<f64>,
    marks: Vec<f64>,
    cursor: usize,
    next_candidate: f64,
    divergent: bool,
}

pub fn simulate_controlled_paths(
    spec: &ProblemSpec,
    policy: Policy<'_>,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> SimResult<PathEnsemble> {
    run(spec, grid, n_paths, seed, Mode::Policy(policy), SimOptions::default())
}

pub fn simulate_controlled_paths_with(
    spec: &ProblemSpec,
    policy: Policy<'_>,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: SimOptions,
) -> SimResult<PathEnsemble> {
    run(spec, grid, n_paths, seed, Mode::Policy(policy), opts)
}

/// Randomized pair (X̄, Ī) under the nominal measure.
pub fn simulate_randomized_pair(
    spec: &ProblemSpec,
    measure: &JumpMeasure,
    a0: f64,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: SimOptions,
) -> SimResult<PathEnsemble> {
    check_measure(spec, measure, a0)?;
    run(spec, grid, n_paths, seed, Mode::Prejumped { measure, a0 }, opts)
}

/// Randomized pair simulated under the intensity ν(a)λ(da) by thinning a
/// dominating process of rate bound·λ(A). Rates are read at the step's left node.
#[allow(clippy::too_many_arguments)]
pub fn simulate_under_intensity(
    spec: &ProblemSpec,
    field: &dyn IntensityField,
    measure: &JumpMeasure,
    a0: f64,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: SimOptions,
) -> SimResult<PathEnsemble> {
    check_measure(spec, measure, a0)?;
    if !(field.bound().is_finite() && field.bound() > 0.0) {
        return Err(SimError::InvalidArgument("intensity bound must be positive".into()));
    }
    run(spec, grid, n_paths, seed, Mode::Thinning { field, measure, a0 }, opts)
}

fn check_measure(spec: &ProblemSpec, measure: &JumpMeasure, a0: f64) -> SimResult<()> {
    if !measure.space().same_set(&spec.control_space) {
        return Err(SimError::InvalidArgument("jump measure lives on a different control space".into()));
    }
    if !spec.control_space.contains(a0) {
        return Err(SimError::InvalidArgument(format!("initial action {a0} is not in A")));
    }
    Ok(())
}

struct Rows<'a> {
    start: usize,
    next_states: &'a mut [f64],
    incs: &'a mut [f64],
    ctrls: &'a mut [f64],
    next_summ: Option<&'a mut [f64]>,
    walkers: &'a mut [Walker],
}

fn run(
    spec: &ProblemSpec,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    mode: Mode<'_>,
    opts: SimOptions,
) -> SimResult<PathEnsemble> {
    spec.check_structure()?;
    if n_paths == 0 {
        return Err(SimError::InvalidArgument("n_paths must be positive".into()));
    }
    let n = spec.dim_state;
    let d = spec.dim_noise;
    let kk = grid.n_steps();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let sspec = spec.summary.clone();
    let sd = sspec.dim();
    let markov = sspec.is_markovian();

    let mut states = vec![0.0; (kk + 1) * n_paths * n];
    let mut increments = vec![0.0; kk * n_paths * d];
    let mut controls = vec![0.0; (kk + 1) * n_paths];
    let mut summaries = if markov { None } else { Some(vec![0.0; (kk + 1) * n_paths * sd]) };

    for p in 0..n_paths {
        states[p * n..(p + 1) * n].copy_from_slice(&spec.x0);
        if let Some(s) = summaries.as_mut() {
            sspec.init(&spec.x0, &mut s[p * sd..(p + 1) * sd]);
        }
    }

    let mut walkers: Vec<Walker> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let pp = p as u64;
            let mut w = Walker {
                bm: substream(seed, pp, StreamTag::Brownian),
                aux: None,
                bridge: opts.insert_jump_nodes.then(|| substream(seed, pp, StreamTag::Bridge)),
                current: 0.0,
                times: Vec::new(),
                marks: Vec::new(),
                cursor: 0,
                next_candidate: f64::INFINITY,
                divergent: false,
            };
            match &mode {
                Mode::Policy(_) => {}
                Mode::Prejumped { measure, a0 } => {
                    let mut r = substream(seed, pp, StreamTag::Jumps);
                    let tr = draw_jumps(measure, *a0, grid.t_end(), &mut r);
                    w.times = tr.times;
                    w.marks = tr.marks;
                    w.current = *a0;
                }
                Mode::Thinning { field, measure, a0 } => {
                    let mut r = substream(seed, pp, StreamTag::Thinning);
                    let e: f64 = Exp1.sample(&mut r);
                    w.next_candidate = e / (field.bound() * measure.lambda_total());
                    w.aux = Some(r);
                    w.current = *a0;
                }
            }
            w
        })
        .collect();

    for k in 0..kk {
        let t = grid.time(k);
        let t1 = grid.time(k + 1);
        let (head, tail) = states.split_at_mut((k + 1) * n_paths * n);
        let prev_states: &[f64] = head;
        let next_states = &mut tail[..n_paths * n];
        let incs = &mut increments[k * n_paths * d..(k + 1) * n_paths * d];
        let ctrls = &mut controls[k * n_paths..(k + 1) * n_paths];
        let (prev_summ, next_summ): (Option<&[f64]>, Option<&mut [f64]>) = match summaries.as_mut() {
            None => (None, None),
            Some(s) => {
                let (h, t2) = s.split_at_mut((k + 1) * n_paths * sd);
                (Some(&h[k * n_paths * sd..]), Some(&mut t2[..n_paths * sd]))
            }
        };

        let mut rows = Vec::with_capacity(n_paths.div_ceil(CHUNK));
        {
            let mut ns = next_states.chunks_mut(CHUNK * n);
            let mut ic = incs.chunks_mut(CHUNK * d);
            let mut cc = ctrls.chunks_mut(CHUNK);
            let mut ss = next_summ.map(|s| s.chunks_mut(CHUNK * sd));
            let mut ww = walkers.chunks_mut(CHUNK);
            let mut start = 0;
            for w in ww.by_ref() {
                let len = w.len();
                rows.push(Rows {
                    start,
                    next_states: ns.next().unwrap(),
                    incs: ic.next().unwrap(),
                    ctrls: cc.next().unwrap(),
                    next_summ: ss.as_mut().map(|it| it.next().unwrap()),
                    walkers: w,
                });
                start += len;
            }
        }

        rows.into_par_iter().try_for_each(|row| -> SimResult<()> {
            let mut b = vec![0.0; n];
            let mut sig = vec![0.0; n * d];
            let mut dw = vec![0.0; d];
            let mut seg_summary = vec![0.0; sd];
            let mut xs = vec![0.0; n];
            let Rows { start, next_states, incs, ctrls, mut next_summ, walkers } = row;
            for (i, w) in walkers.iter_mut().enumerate() {
                let p = start + i;
                let x_prev = &prev_states[(k * n_paths + p) * n..(k * n_paths + p + 1) * n];
                let s_prev: &[f64] = match prev_summ {
                    None => x_prev,
                    Some(s) => &s[p * sd..(p + 1) * sd],
                };
                for z in dw.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut w.bm);
                    *z = g * sdt;
                }
                incs[i * d..(i + 1) * d].copy_from_slice(&dw);
                let out = &mut next_states[i * n..(i + 1) * n];
                if w.divergent {
                    ctrls[i] = f64::NAN;
                    out.fill(f64::NAN);
                    if let Some(ns) = next_summ.as_mut() {
                        ns[i * sd..(i + 1) * sd].fill(f64::NAN);
                    }
                    continue;
                }

                let a = match &mode {
                    Mode::Policy(pol) => pol(t, s_prev),
                    Mode::Prejumped { .. } => {
                        while w.cursor < w.times.len() && w.times[w.cursor] <= t {
                            w.current = w.marks[w.cursor];
                            w.cursor += 1;
                        }
                        w.current
                    }
                    Mode::Thinning { .. } => w.current,
                };
                ctrls[i] = a;

                // jumps inside (t, t1], in order, with the action that follows each
                let mut inner: Vec<(f64, f64)> = Vec::new();
                match &mode {
                    Mode::Policy(_) => {}
                    Mode::Prejumped { .. } => {
                        let mut c = w.cursor;
                        while c < w.times.len() && w.times[c] <= t1 {
                            inner.push((w.times[c], w.marks[c]));
                            c += 1;
                        }
                    }
                    Mode::Thinning { field, measure, .. } => {
                        let bound = field.bound();
                        let dom = bound * measure.lambda_total();
                        let rng = w.aux.as_mut().expect("thinning stream");
                        let mut cur = w.current;
                        while w.next_candidate <= t1 {
                            let tau = w.next_candidate;
                            let cand = measure.sample_mark(rng);
                            let u: f64 = rng.random();
                            let r = field.rate(t, s_prev, cur, cand).map_err(SimError::Intensity)?;
                            if u * bound < r {
                                inner.push((tau, cand));
                                w.times.push(tau);
                                w.marks.push(cand);
                                cur = cand;
                            }
                            let e: f64 = Exp1.sample(rng);
                            w.next_candidate += e / dom;
                        }
                        w.current = cur;
                    }
                }

                if !opts.insert_jump_nodes || inner.is_empty() {
                    spec.drift(t, s_prev, a, &mut b);
                    spec.diffusion(t, s_prev, a, &mut sig);
                    for r in 0..n {
                        let mut v = x_prev[r] + b[r] * dt;
                        for c in 0..d {
                            v += sig[r * d + c] * dw[c];
                        }
                        out[r] = v;
                    }
                } else {
                    let bridge = w.bridge.as_mut().expect("bridge stream");
                    xs.copy_from_slice(x_prev);
                    seg_summary.copy_from_slice(s_prev);
                    let mut rem = dw.clone();
                    let mut tau0 = t;
                    let mut act = a;
                    let mut ends: Vec<(f64, f64)> = inner.clone();
                    ends.push((t1, f64::NAN));
                    for (j, &(tau1, next_act)) in ends.iter().enumerate() {
                        let h = tau1 - tau0;
                        let r_time = t1 - tau0;
                        let last = j + 1 == ends.len();
                        let mut piece = vec![0.0; d];
                        for c in 0..d {
                            piece[c] = if last || r_time <= 0.0 {
                                rem[c]
                            } else {
                                let mean = rem[c] * h / r_time;
                                let var = (h * (r_time - h) / r_time).max(0.0);
                                let z: f64 = StandardNormal.sample(bridge);
                                mean + var.sqrt() * z
                            };
                            rem[c] -= piece[c];
                        }
                        seg_summary[..n].copy_from_slice(&xs);
                        let s_use: &[f64] = if markov { &xs } else { &seg_summary };
                        spec.drift(tau0, s_use, act, &mut b);
                        spec.diffusion(tau0, s_use, act, &mut sig);
                        let mut nx = vec![0.0; n];
                        for r in 0..n {
                            let mut v = xs[r] + b[r] * h;
                            for c in 0..d {
                                v += sig[r * d + c] * piece[c];
                            }
                            nx[r] = v;
                        }
                        xs.copy_from_slice(&nx);
                        tau0 = tau1;
                        if !last {
                            act = next_act;
                        }
                    }
                    out.copy_from_slice(&xs);
                }

                if out.iter().any(|v| !v.is_finite()) {
                    w.divergent = true;
                    out.fill(f64::NAN);
                }
                if let Some(ns) = next_summ.as_mut() {
                    let dst = &mut ns[i * sd..(i + 1) * sd];
                    if w.divergent {
                        dst.fill(f64::NAN);
                    } else {
                        let xnext: Vec<f64> = out.to_vec();
                        sspec.advance(
                            s_prev,
                            k + 1,
                            &xnext,
                            |j| &prev_states[(j * n_paths + p) * n..(j * n_paths + p + 1) * n],
                            dst,
                        );
                    }
                }
            }
            Ok(())
        })?;
    }

    // terminal action
    let tk = grid.t_end();
    for (p, w) in walkers.iter_mut().enumerate() {
        let a = if w.divergent {
            f64::NAN
        } else {
            match &mode {
                Mode::Policy(pol) => {
                    let s: &[f64] = match &summaries {
                        None => &states[(kk * n_paths + p) * n..(kk * n_paths + p + 1) * n],
                        Some(s) => &s[(kk * n_paths + p) * sd..(kk * n_paths + p + 1) * sd],
                    };
                    pol(tk, s)
                }
                Mode::Prejumped { .. } => {
                    while w.cursor < w.times.len() && w.times[w.cursor] <= tk {
                        w.current = w.marks[w.cursor];
                        w.cursor += 1;
                    }
                    w.current
                }
                Mode::Thinning { .. } => w.current,
            }
        };
        controls[kk * n_paths + p] = a;
    }

    let divergent: Vec<bool> = walkers.iter().map(|w| w.divergent).collect();
    let n_div = divergent.iter().filter(|&&x| x).count();
    let limit = (opts.max_divergent_fraction * n_paths as f64).floor() as usize;
    if n_div > limit {
        return Err(SimError::Divergence { divergent: n_div, n_paths, limit });
    }

    let measure = match &mode {
        Mode::Policy(_) => None,
        Mode::Prejumped { measure, .. } | Mode::Thinning { measure, .. } => Some((*measure).clone()),
    };
    let (ens_mode, jumps) = match &mode {
        Mode::Policy(_) => (EnsembleMode::Controlled, None),
        Mode::Prejumped { a0, .. } | Mode::Thinning { a0, .. } => {
            let kind =
                if matches!(mode, Mode::Prejumped { .. }) { EnsembleMode::Randomized } else { EnsembleMode::Intensity };
            let j = walkers.into_iter().map(|w| JumpTrajectory { a0: *a0, times: w.times, marks: w.marks }).collect();
            (kind, Some(j))
        }
    };

    Ok(PathEnsemble {
        grid,
        n_paths,
        dim_state: n,
        dim_noise: d,
        seed,
        mode: ens_mode,
        x0: spec.x0.clone(),
        summary_spec: sspec,
        measure,
        states,
        increments,
        controls,
        summaries,
        jumps,
        divergent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub t: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub p: f64,
    pub c_bar: f64,
    pub beta_bar: f64,
    pub rows: Vec<MomentRow>,
    pub pass: bool,
    /// First failing time, if any.
    pub first_failure: Option<f64>,
}

/// Empirical E[sup_{s ≤ t_k}|X_s|^p] against C̄ e^{β̄ t_k}(1 + |x0|^p).
pub fn check_moment_bound(ens: &PathEnsemble, p: f64, spec: &ProblemSpec) -> SimResult<MomentReport> {
    if ens.n_paths == 0 {
        return Err(SimError::InvalidArgument("empty ensemble".into()));
    }
    let g = growth_constants(p, spec.lipschitz, spec.bdg_for(p))?;
    let base = 1.0 + norm(&ens.x0).powf(p);
    let active: Vec<usize> = ens.active_paths().collect();
    let mut sup = vec![0.0f64; active.len()];
    let mut rows = Vec::with_capacity(ens.grid.n_steps() + 1);
    let mut first_failure = None;
    let mut vals = vec![0.0; active.len()];
    for k in 0..=ens.grid.n_steps() {
        for (i, &pth) in active.iter().enumerate() {
            sup[i] = sup[i].max(norm(ens.state(pth, k)));
            vals[i] = sup[i].powf(p);
        }
        let (m, se) = mean_stderr(&vals);
        let se = if se.is_finite() { se } else { 0.0 };
        let t = ens.grid.time(k);
        let bound = g.c_bar * (g.beta_bar * t).exp() * base;
        let pass = m <= bound + 3.0 * se;
        if !pass && first_failure.is_none() {
            first_failure = Some(t);
        }
        rows.push(MomentRow { t, empirical: m, stderr: se, bound, pass });
    }
    Ok(MomentReport { p, c_bar: g.c_bar, beta_bar: g.beta_bar, pass: first_failure.is_none(), rows, first_failure })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{ControlSpace, FnCoefficients, Regime};
    use std::sync::Arc;

    fn spec(b: f64, s: f64) -> ProblemSpec {
        ProblemSpec::new(
            "lin",
            Arc::new(FnCoefficients::scalar(move |_, x, _| b * x[0], move |_, _, _| s, |_, _, _| 0.0)),
            vec![1.0],
            ControlSpace::finite(vec![0.0]).unwrap(),
            1.0,
            Regime::Bounded { f_sup: 0.0 },
            b.abs() + s.abs(),
        )
        .unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = TimeGrid::new(3.0, 7).unwrap();
        assert_eq!(g.dt(), 3.0 / 7.0);
        assert_eq!(g.time(7), 3.0);
        assert_eq!(g.step_containing(g.dt() * 1.5), 1);
        assert_eq!(g.step_containing(g.dt()), 0);
        assert!(TimeGrid::with_step(1.0, 0.3).is_err());
        assert_eq!(TimeGrid::with_step(1.0, 0.25).unwrap().n_steps(), 4);
        assert_eq!(g.node_of(3.0), Some(7));
    }

    #[test]
    fn trajectory_step_process() {
        let tr = JumpTrajectory::new(0.0, vec![0.5, 1.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(tr.action_at(0.49), 0.0);
        assert_eq!(tr.action_at(0.5), 1.0);
        assert_eq!(tr.action_before(0.5), 0.0);
        assert_eq!(tr.action_at(3.0), 2.0);
        assert_eq!(tr.count_in(0.0, 1.0), 2);
        assert_eq!(tr.count_in(0.5, 1.0), 1);
        assert!(JumpTrajectory::new(0.0, vec![1.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(JumpTrajectory::new(0.0, vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn deterministic_ode() {
        let s = spec(-1.0, 0.0);
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let e = simulate_controlled_paths(&s, &|_, _| 0.0, g, 4, 1).unwrap();
        for p in 0..4 {
            assert!((e.state(p, 1000)[0] - (-1.0f64).exp()).abs() < 1e-3);
            assert_eq!(e.state(p, 0), &[1.0]);
        }
    }

    #[test]
    fn divergence_aborts() {
        let coeffs = FnCoefficients::scalar(|_, x, _| x[0] * x[0] * 1e3, |_, _, _| 1.0, |_, _, _| 0.0);
        let s = ProblemSpec::new(
            "blowup",
            Arc::new(coeffs),
            vec![1.0],
            ControlSpace::finite(vec![0.0]).unwrap(),
            1.0,
            Regime::Bounded { f_sup: 0.0 },
            1.0,
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let err = simulate_controlled_paths(&s, &|_, _| 0.0, g, 50, 3).unwrap_err();
        assert!(matches!(err, SimError::Divergence { .. }));
    }
}
