//! Control problems, standing-assumption checks and moment-growth constants.

use std::fmt;
use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::legendre::GaussLegendre;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::rng::{substream, StreamTag};
use crate::summary::PathSummarySpec;

/// Number of Gauss-Legendre nodes used for integrals over an interval control space.
pub const GL_NODES: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("assumption violation: {0}")]
    AssumptionViolation(String),
    #[error("expression error: {0}")]
    Expression(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

fn invalid<T>(msg: impl Into<String>) -> ModelResult<T> {
    Err(ModelError::InvalidArgument(msg.into()))
}

/// The action set: finitely many labelled reals or a compact interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSpace {
    Finite { actions: Vec<f64>, labels: Vec<String> },
    Interval { lo: f64, hi: f64 },
}

impl ControlSpace {
    pub fn finite(actions: Vec<f64>) -> ModelResult<Self> {
        let labels = actions.iter().map(|a| format!("{a}")).collect();
        Self::labeled(actions, labels)
    }

    pub fn labeled(actions: Vec<f64>, labels: Vec<String>) -> ModelResult<Self> {
        let space = ControlSpace::Finite { actions, labels };
        space.check()?;
        Ok(space)
    }

    pub fn interval(lo: f64, hi: f64) -> ModelResult<Self> {
        let space = ControlSpace::Interval { lo, hi };
        space.check()?;
        Ok(space)
    }

    pub fn check(&self) -> ModelResult<()> {
        match self {
            ControlSpace::Finite { actions, labels } => {
                if actions.is_empty() {
                    return invalid("finite control space is empty");
                }
                if labels.len() != actions.len() {
                    return invalid("one label per action is required");
                }
                if actions.iter().any(|a| !a.is_finite()) {
                    return invalid("actions must be finite reals");
                }
                for (i, a) in actions.iter().enumerate() {
                    if actions[..i].contains(a) {
                        return invalid(format!("duplicate action {a}"));
                    }
                }
                Ok(())
            }
            ControlSpace::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) {
                    return invalid("interval bounds must be finite");
                }
                if lo >= hi {
                    return invalid(format!("interval needs lo < hi, got [{lo}, {hi}]"));
                }
                Ok(())
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, ControlSpace::Finite { .. })
    }

    pub fn contains(&self, a: f64) -> bool {
        match self {
            ControlSpace::Finite { actions, .. } => actions.contains(&a),
            ControlSpace::Interval { lo, hi } => a >= *lo && a <= *hi,
        }
    }

    /// Actions of a finite space, or `n` equispaced points of an interval (endpoints included).
    pub fn discretize(&self, n: usize) -> Vec<f64> {
        match self {
            ControlSpace::Finite { actions, .. } => actions.clone(),
            ControlSpace::Interval { lo, hi } => {
                let n = n.max(2);
                (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).min(*hi)).collect()
            }
        }
    }

    /// Same actions, labels ignored.
    pub fn same_set(&self, other: &ControlSpace) -> bool {
        match (self, other) {
            (ControlSpace::Finite { actions: a, .. }, ControlSpace::Finite { actions: b, .. }) => a == b,
            (ControlSpace::Interval { lo: a, hi: b }, ControlSpace::Interval { lo: c, hi: d }) => a == c && b == d,
            _ => false,
        }
    }

    pub fn index_of(&self, a: f64) -> Option<usize> {
        match self {
            ControlSpace::Finite { actions, .. } => actions.iter().position(|&b| b == a),
            ControlSpace::Interval { .. } => None,
        }
    }
}

/// Law of the marks of the randomizing point process.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkDistribution {
    Uniform,
    /// Unnormalized weights, one per action of a finite control space.
    Weights(Vec<f64>),
}

/// Intensity measure λ(da) = lambda_total · mark_dist(da), with its quadrature on A.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpMeasure {
    lambda_total: f64,
    marks: MarkDistribution,
    space: ControlSpace,
    nodes: Vec<f64>,
    masses: Vec<f64>,
    #[serde(skip)]
    cdf: Vec<f64>,
}

impl JumpMeasure {
    pub fn new(space: ControlSpace, lambda_total: f64, marks: MarkDistribution) -> ModelResult<Self> {
        space.check()?;
        if !(lambda_total.is_finite() && lambda_total > 0.0) {
            return invalid(format!("lambda_total must be positive, got {lambda_total}"));
        }
        let (nodes, probs) = match (&space, &marks) {
            (ControlSpace::Finite { actions, .. }, MarkDistribution::Uniform) => {
                let m = actions.len() as f64;
                (actions.clone(), vec![1.0 / m; actions.len()])
            }
            (ControlSpace::Finite { actions, .. }, MarkDistribution::Weights(w)) => {
                if w.len() != actions.len() {
                    return invalid("one mark weight per action is required");
                }
                if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                    return invalid("mark weights must be positive (full support)");
                }
                let s: f64 = w.iter().sum();
                (actions.clone(), w.iter().map(|x| x / s).collect())
            }
            (ControlSpace::Interval { lo, hi }, MarkDistribution::Uniform) => {
                let rule = GaussLegendre::new(NonZeroUsize::new(GL_NODES).unwrap());
                let mut pairs: Vec<(f64, f64)> = rule
                    .as_node_weight_pairs()
                    .iter()
                    .map(|&(x, w)| (0.5 * ((hi - lo) * x + hi + lo), 0.5 * w))
                    .collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                pairs.into_iter().unzip()
            }
            (ControlSpace::Interval { .. }, MarkDistribution::Weights(_)) => {
                return invalid("interval control spaces only support uniform marks");
            }
        };
        let masses: Vec<f64> = probs.iter().map(|p| p * lambda_total).collect();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        Ok(JumpMeasure { lambda_total, marks, space, nodes, masses, cdf })
    }

    pub fn uniform(space: ControlSpace, lambda_total: f64) -> ModelResult<Self> {
        Self::new(space, lambda_total, MarkDistribution::Uniform)
    }

    pub fn lambda_total(&self) -> f64 {
        self.lambda_total
    }

    pub fn marks(&self) -> &MarkDistribution {
        &self.marks
    }

    pub fn space(&self) -> &ControlSpace {
        &self.space
    }

    /// Quadrature actions: all actions for finite A, Gauss-Legendre nodes for interval A.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// λ-mass attached to each quadrature node; sums to lambda_total.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn integrate(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.masses).map(|(&a, &w)| w * g(a)).sum()
    }

    pub fn sample_mark<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        match &self.space {
            ControlSpace::Interval { lo, hi } => lo + (hi - lo) * u,
            ControlSpace::Finite { .. } => {
                let i = self.cdf.iter().position(|&c| u < c).unwrap_or(self.cdf.len() - 1);
                self.nodes[i]
            }
        }
    }

    pub fn with_lambda_total(&self, lambda_total: f64) -> ModelResult<Self> {
        Self::new(self.space.clone(), lambda_total, self.marks.clone())
    }
}

/// Which reward assumption the problem is declared under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// Bounded reward with sup-norm `f_sup`.
    Bounded { f_sup: f64 },
    /// |f| ≤ m (1 + sup|x|^r).
    Polynomial { r: f64, m: f64 },
}

/// Drift, diffusion and running reward evaluated on a path summary.
pub trait Coefficients: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn drift(&self, t: f64, s: &[f64], a: f64, out: &mut [f64]);
    /// Row-major `dim_state × dim_noise` matrix.
    fn diffusion(&self, t: f64, s: &[f64], a: f64, out: &mut [f64]);
    fn reward(&self, t: f64, s: &[f64], a: f64) -> f64;
}

type VecFn = dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync;
type ScalarFn = dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync;

/// Coefficients assembled from closures.
#[derive(Clone)]
pub struct FnCoefficients {
    n: usize,
    d: usize,
    drift: Arc<VecFn>,
    diffusion: Arc<VecFn>,
    reward: Arc<ScalarFn>,
}

impl FnCoefficients {
    pub fn new(
        n: usize,
        d: usize,
        drift: impl Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static,
        reward: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FnCoefficients { n, d, drift: Arc::new(drift), diffusion: Arc::new(diffusion), reward: Arc::new(reward) }
    }

    /// Scalar state and noise.
    pub fn scalar(
        drift: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
        reward: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            1,
            1,
            move |t, s, a, out| out[0] = drift(t, s, a),
            move |t, s, a, out| out[0] = diffusion(t, s, a),
            reward,
        )
    }
}

impl Coefficients for FnCoefficients {
    fn dim_state(&self) -> usize {
        self.n
    }
    fn dim_noise(&self) -> usize {
        self.d
    }
    fn drift(&self, t: f64, s: &[f64], a: f64, out: &mut [f64]) {
        (self.drift)(t, s, a, out)
    }
    fn diffusion(&self, t: f64, s: &[f64], a: f64, out: &mut [f64]) {
        (self.diffusion)(t, s, a, out)
    }
    fn reward(&self, t: f64, s: &[f64], a: f64) -> f64 {
        (self.reward)(t, s, a)
    }
}

/// A discounted infinite-horizon control problem.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub coefficients: Arc<dyn Coefficients>,
    pub beta: f64,
    pub x0: Vec<f64>,
    pub control_space: ControlSpace,
    pub regime: Regime,
    pub lipschitz: f64,
    pub summary: PathSummarySpec,
    /// Overrides the default BDG constant used in the growth constants.
    pub bdg_constant: Option<f64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("beta", &self.beta)
            .field("x0", &self.x0)
            .field("control_space", &self.control_space)
            .field("regime", &self.regime)
            .field("lipschitz", &self.lipschitz)
            .field("summary", &self.summary)
            .finish()
    }
}

impl ProblemSpec {
    pub fn new(
        name: impl Into<String>,
        coefficients: Arc<dyn Coefficients>,
        x0: Vec<f64>,
        control_space: ControlSpace,
        beta: f64,
        regime: Regime,
        lipschitz: f64,
    ) -> ModelResult<Self> {
        let n = coefficients.dim_state();
        let spec = ProblemSpec {
            name: name.into(),
            dim_state: n,
            dim_noise: coefficients.dim_noise(),
            coefficients,
            beta,
            x0,
            control_space,
            regime,
            lipschitz,
            summary: PathSummarySpec::markovian(n),
            bdg_constant: None,
        };
        spec.check_structure()?;
        Ok(spec)
    }

    pub fn with_summary(mut self, summary: PathSummarySpec) -> ModelResult<Self> {
        self.summary = summary;
        self.check_structure()?;
        Ok(self)
    }

    pub fn with_bdg_constant(mut self, c: f64) -> ModelResult<Self> {
        if !(c.is_finite() && c > 0.0) {
            return invalid("BDG constant must be positive");
        }
        self.bdg_constant = Some(c);
        Ok(self)
    }

    pub fn check_structure(&self) -> ModelResult<()> {
        if self.dim_state == 0 || self.dim_noise == 0 {
            return invalid("state and noise dimensions must be positive");
        }
        if self.x0.len() != self.dim_state {
            return invalid(format!("x0 has {} components, expected {}", self.x0.len(), self.dim_state));
        }
        if self.x0.iter().any(|x| !x.is_finite()) {
            return invalid("x0 must be finite");
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return invalid(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.lipschitz.is_finite() && self.lipschitz >= 0.0) {
            return invalid("Lipschitz constant must be finite and nonnegative");
        }
        match self.regime {
            Regime::Bounded { f_sup } => {
                if !(f_sup.is_finite() && f_sup >= 0.0) {
                    return invalid("bounded regime needs a finite reward bound");
                }
            }
            Regime::Polynomial { r, m } => {
                if !(r.is_finite() && r > 0.0) {
                    return invalid("polynomial regime needs r > 0");
                }
                if !(m.is_finite() && m > 0.0) {
                    return invalid("polynomial regime needs M > 0");
                }
            }
        }
        if self.summary.dim_state != self.dim_state {
            return invalid("path summary dimension does not match the state");
        }
        self.summary.check().map_err(ModelError::InvalidArgument)?;
        self.control_space.check()
    }

    /// True when the coefficients only see the current state.
    pub fn is_markovian(&self) -> bool {
        self.summary.is_markovian()
    }

    pub fn f_sup(&self) -> Option<f64> {
        match self.regime {
            Regime::Bounded { f_sup } => Some(f_sup),
            Regime::Polynomial { .. } => None,
        }
    }

    pub fn bdg_for(&self, p: f64) -> f64 {
        self.bdg_constant.unwrap_or_else(|| default_bdg_constant(p))
    }

    /// Growth constants at the reward exponent (A') or at p = 2 (A).
    pub fn growth(&self) -> ModelResult<GrowthConstants> {
        let p = match self.regime {
            Regime::Polynomial { r, .. } => r,
            Regime::Bounded { .. } => 2.0,
        };
        growth_constants(p, self.lipschitz, self.bdg_for(p))
    }

    /// Exponential rate at which the horizon-truncation error decays.
    pub fn decay_rate(&self) -> ModelResult<f64> {
        match self.regime {
            Regime::Bounded { .. } => Ok(self.beta),
            Regime::Polynomial { .. } => {
                let g = self.growth()?;
                let rate = self.beta - g.beta_bar;
                if rate <= 0.0 {
                    return Err(ModelError::AssumptionViolation(format!(
                        "beta = {} does not exceed beta_bar = {}",
                        self.beta, g.beta_bar
                    )));
                }
                Ok(rate)
            }
        }
    }

    fn x0_norm(&self) -> f64 {
        norm(&self.x0)
    }

    /// Analytic bound on |V(x)| at the given state.
    pub fn value_bound_at(&self, x: &[f64]) -> ModelResult<f64> {
        match self.regime {
            Regime::Bounded { f_sup } => Ok(f_sup / self.beta),
            Regime::Polynomial { r, m } => {
                let g = self.growth()?;
                let rate = self.decay_rate()?;
                Ok(2.0 * m * (1.0 + g.c_bar) / rate * (1.0 + norm(x).powf(r)))
            }
        }
    }

    /// Bound on |Y^{T'} − Y^T| at time 0 for T' ≥ T.
    pub fn tail_bound(&self, t: f64) -> ModelResult<f64> {
        match self.regime {
            Regime::Bounded { f_sup } => Ok(f_sup / self.beta * (-self.beta * t).exp()),
            Regime::Polynomial { r, m } => {
                let g = self.growth()?;
                let rate = self.decay_rate()?;
                Ok(2.0 * m * (1.0 + g.c_bar) / rate * (1.0 + self.x0_norm().powf(r)) * (-rate * t).exp())
            }
        }
    }

    /// Bound on |V − V_T|.
    pub fn truncation_bound(&self, t: f64) -> ModelResult<f64> {
        match self.regime {
            Regime::Bounded { f_sup } => Ok(f_sup * (-self.beta * t).exp() / self.beta),
            Regime::Polynomial { r, m } => {
                let g = self.growth()?;
                let rate = self.decay_rate()?;
                Ok(m * (-self.beta * t).exp() / self.beta
                    + m * g.c_bar * (1.0 + self.x0_norm().powf(r)) * (-rate * t).exp() / rate)
            }
        }
    }

    pub fn drift(&self, t: f64, s: &[f64], a: f64, out: &mut [f64]) {
        self.coefficients.drift(t, s, a, out)
    }

    pub fn diffusion(&self, t: f64, s: &[f64], a: f64, out: &mut [f64]) {
        self.coefficients.diffusion(t, s, a, out)
    }

    pub fn reward(&self, t: f64, s: &[f64], a: f64) -> f64 {
        self.coefficients.reward(t, s, a)
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Moment-growth constants C̄_{p,L}, β̄_{p,L}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthConstants {
    pub p: f64,
    pub c_bar: f64,
    pub beta_bar: f64,
    pub bdg_constant: f64,
}

/// Default BDG constant: 2 for p ≤ 2, (p/(p−1))^p p^{p/2} above.
pub fn default_bdg_constant(p: f64) -> f64 {
    if p <= 2.0 {
        2.0
    } else {
        (p / (p - 1.0)).powf(p) * p.powf(p / 2.0)
    }
}

/// Closed-form growth constants. For p < 2 the constant passed is C_2.
pub fn growth_constants(p: f64, l: f64, c_bdg: f64) -> ModelResult<GrowthConstants> {
    if !(p.is_finite() && p > 0.0) {
        return invalid(format!("moment order must be positive, got {p}"));
    }
    if !(l.is_finite() && l >= 0.0) {
        return invalid(format!("Lipschitz constant must be nonnegative, got {l}"));
    }
    if !(c_bdg.is_finite() && c_bdg > 0.0) {
        return invalid(format!("BDG constant must be positive, got {c_bdg}"));
    }
    let (c_bar, beta_bar) = if p >= 2.0 {
        let c = 2f64.powf(p + p / 2.0 - 1.0) * f64::max(1.0, ((1.0 + c_bdg) * l).powf(p));
        let b = p / 2.0 * (1.0 + 4.0 * (1.0 + c_bdg * c_bdg) * l * l);
        (c, b)
    } else {
        let c = 2f64.powf(p) * f64::max(1.0, ((1.0 + c_bdg) * l).powf(p));
        let b = p / 2.0 * (1.0 + 4.0 * (1.0 + c_bdg * c_bdg) * l * l);
        (c, b)
    };
    Ok(GrowthConstants { p, c_bar, beta_bar, bdg_constant: c_bdg })
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub samples: usize,
    pub slack: f64,
    pub seed: u64,
    pub t_max: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { samples: 256, slack: 1.05, seed: 0x5eed_1234, t_max: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaCheck {
    pub beta: f64,
    pub beta_bar: f64,
    pub c_bar: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSample {
    pub t: f64,
    pub action: f64,
    pub summary: Vec<f64>,
    pub other_summary: Vec<f64>,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzProbe {
    pub samples: usize,
    pub declared: f64,
    pub empirical: f64,
    pub pass: bool,
    pub offending: Option<ProbeSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardProbe {
    pub samples: usize,
    /// Largest |f| / bound over the samples.
    pub worst_ratio: f64,
    pub pass: bool,
    pub offending: Option<ProbeSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub beta_check: Option<BetaCheck>,
    pub lipschitz: LipschitzProbe,
    pub reward: RewardProbe,
    /// Value bound at x0.
    pub value_bound: f64,
    /// β under (A), β − β̄ under (A').
    pub decay_rate: f64,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.lipschitz.pass && self.reward.pass
    }
}

pub fn validate_problem(spec: &ProblemSpec) -> ModelResult<ValidationReport> {
    validate_problem_with(spec, &ProbeConfig::default())
}

pub fn validate_problem_with(spec: &ProblemSpec, cfg: &ProbeConfig) -> ModelResult<ValidationReport> {
    spec.check_structure()?;
    let beta_check = match spec.regime {
        Regime::Polynomial { .. } => {
            let g = spec.growth()?;
            if spec.beta <= g.beta_bar {
                return Err(ModelError::AssumptionViolation(format!(
                    "beta = {} must exceed beta_bar = {} (p = {}, L = {}, C_p = {})",
                    spec.beta, g.beta_bar, g.p, spec.lipschitz, g.bdg_constant
                )));
            }
            Some(BetaCheck { beta: spec.beta, beta_bar: g.beta_bar, c_bar: g.c_bar, margin: spec.beta - g.beta_bar })
        }
        Regime::Bounded { .. } => None,
    };

    let mut rng = substream(cfg.seed, 0, StreamTag::Probe);
    let n = spec.dim_state;
    let d = spec.dim_noise;
    let len = spec.summary.history_len().max(8);
    let actions = spec.control_space.discretize(9);
    let mut b1 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut s1m = vec![0.0; n * d];
    let mut s2m = vec![0.0; n * d];

    let mut lip =
        LipschitzProbe { samples: cfg.samples, declared: spec.lipschitz, empirical: 0.0, pass: true, offending: None };
    let mut worst_lip = -1.0;
    let mut reward = RewardProbe { samples: cfg.samples, worst_ratio: 0.0, pass: true, offending: None };
    let mut worst_rew = -1.0;

    for i in 0..cfg.samples {
        let t = rng.random::<f64>() * cfg.t_max;
        let a = actions[rng.random_range(0..actions.len())];
        let scale = [0.5, 2.0, 8.0][i % 3];
        let path = random_path(&mut rng, n, len, scale);
        let eps = [1e-3, 0.1, 1.0][(i / 3) % 3];
        let other: Vec<f64> = {
            let bump = random_path(&mut rng, n, len, eps);
            path.iter().zip(&bump).map(|(x, y)| x + y).collect()
        };
        let sp = spec.summary.summarize(&path);
        let so = spec.summary.summarize(&other);
        let dist = path
            .chunks(n)
            .zip(other.chunks(n))
            .map(|(x, y)| {
                let diff: Vec<f64> = x.iter().zip(y).map(|(u, v)| u - v).collect();
                norm(&diff)
            })
            .fold(0.0, f64::max);
        spec.drift(t, &sp, a, &mut b1);
        spec.drift(t, &so, a, &mut b2);
        spec.diffusion(t, &sp, a, &mut s1m);
        spec.diffusion(t, &so, a, &mut s2m);
        let db: Vec<f64> = b1.iter().zip(&b2).map(|(u, v)| u - v).collect();
        let ds: Vec<f64> = s1m.iter().zip(&s2m).map(|(u, v)| u - v).collect();
        let num = norm(&db) + norm(&ds);
        if dist > 0.0 {
            let ratio = num / dist;
            if !ratio.is_finite() || ratio > worst_lip {
                worst_lip = ratio;
                lip.empirical = ratio;
                if !(ratio.is_finite() && ratio <= cfg.slack * spec.lipschitz) {
                    lip.pass = false;
                    lip.offending =
                        Some(ProbeSample { t, action: a, summary: sp.clone(), other_summary: so.clone(), ratio });
                }
            }
        }

        let fv = spec.reward(t, &sp, a);
        let sup = path.chunks(n).map(norm).fold(0.0, f64::max);
        let bound = match spec.regime {
            Regime::Bounded { f_sup } => f_sup,
            Regime::Polynomial { r, m } => m * (1.0 + sup.powf(r)),
        };
        let ratio = if bound > 0.0 {
            fv.abs() / bound
        } else if fv == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if !ratio.is_finite() || ratio > worst_rew {
            worst_rew = ratio;
            reward.worst_ratio = ratio;
            if !(ratio.is_finite() && ratio <= 1.0 + 1e-12) {
                reward.pass = false;
                reward.offending = Some(ProbeSample { t, action: a, summary: sp, other_summary: Vec::new(), ratio });
            }
        }
    }

    let mut warnings = Vec::new();
    if !lip.pass {
        warnings.push(format!(
            "Lipschitz probe exceeded the declared L = {}; empirical L is about {:.4}",
            spec.lipschitz, lip.empirical
        ));
    }
    if !reward.pass {
        warnings.push(format!("reward growth probe exceeded the declared bound by a factor {:.4}", reward.worst_ratio));
    }
    if !spec.is_markovian() {
        warnings.push(
            "coefficients depend on a finite path summary; its fidelity to the full path is not checked".to_string(),
        );
    }
    Ok(ValidationReport {
        beta_check,
        lipschitz: lip,
        reward,
        value_bound: spec.value_bound_at(&spec.x0)?,
        decay_rate: spec.decay_rate()?,
        warnings,
    })
}

fn random_path<R: Rng>(rng: &mut R, n: usize, len: usize, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * len);
    let mut x: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    for _ in 0..len {
        out.extend_from_slice(&x);
        for xi in x.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *xi += 0.25 * scale * z;
        }
    }
    out
}
