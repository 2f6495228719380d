//! Experiment configuration files (JSON) and their resolution against the zoo.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rbsde_core::bsde::{PenaltyScheme, Schedule, SolverOptions, Stage};
use rbsde_core::expr::ExprCoefficients;
use rbsde_core::hjb::SpatialGrid;
use rbsde_core::problem::{Coefficients, ControlSpace, JumpMeasure, ProblemSpec, Regime};
use rbsde_core::regression::RegressionBasis;
use rbsde_core::summary::PathSummarySpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::zoo::{zoo_coefficients, zoo_problem, BsdeStage, KnownValue, NAMES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown zoo problem {0:?} (known: {names})", names = NAMES.join(", "))]
    UnknownProblem(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Simulate,
    SolveBsde,
    SolveHjb,
    Compare,
    Invariants,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Simulate => "simulate",
            StageKind::SolveBsde => "solve-bsde",
            StageKind::SolveHjb => "solve-hjb",
            StageKind::Compare => "compare",
            StageKind::Invariants => "invariants",
        }
    }

    pub fn all() -> Vec<StageKind> {
        vec![StageKind::Simulate, StageKind::SolveBsde, StageKind::SolveHjb, StageKind::Compare, StageKind::Invariants]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemRef {
    Zoo(String),
    Inline(Box<InlineProblem>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub name: String,
    pub beta: f64,
    pub x0: Vec<f64>,
    pub regime: RegimeConfig,
    pub lipschitz: f64,
    pub control_space: ControlSpaceConfig,
    pub coefficients: CoefficientsConfig,
    #[serde(default)]
    pub summary: Option<PathSummarySpec>,
    #[serde(default)]
    pub bdg_constant: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum RegimeConfig {
    #[serde(rename = "A")]
    Bounded { f_sup: f64 },
    #[serde(rename = "A'")]
    Polynomial { r: f64, m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ControlSpaceConfig {
    Finite(Vec<f64>),
    Interval([f64; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientsConfig {
    Zoo(String),
    Expressions { drift: String, diffusion: String, reward: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub simulation: u64,
    pub evaluation: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub dt: Option<f64>,
    pub lambda_total: Option<f64>,
    pub a0: Option<f64>,
    pub basis: Option<RegressionBasis>,
    pub scheme: Option<PenaltyScheme>,
    pub truncate_to_bounds: Option<bool>,
    pub target_tol: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub dx: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub horizon: f64,
    pub n_paths: usize,
    pub export_paths: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { horizon: 10.0, n_paths: 2000, export_paths: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSection {
    pub samples: usize,
    pub n_paths: usize,
    pub sigma: f64,
}

impl Default for InvariantSection {
    fn default() -> Self {
        InvariantSection { samples: 4, n_paths: 5000, sigma: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemRef,
    /// Defaults to every stage the problem supports.
    #[serde(default)]
    pub pipeline: Option<Vec<StageKind>>,
    #[serde(default)]
    pub schedule: Option<Vec<Stage>>,
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub hjb: Option<HjbSection>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub invariants: InvariantSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Minimal config running the full pipeline on a zoo problem.
    pub fn for_zoo(name: &str, simulation: u64, evaluation: u64) -> Self {
        ExperimentConfig {
            problem: ProblemRef::Zoo(name.to_string()),
            pipeline: None,
            schedule: None,
            seeds: Seeds { simulation, evaluation },
            output_dir: None,
            solver: SolverSection::default(),
            hjb: None,
            simulate: SimulateSection::default(),
            invariants: InvariantSection::default(),
        }
    }
}

/// A config with the zoo defaults filled in and the problem built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: ProblemSpec,
    pub known_value: Option<KnownValue>,
    pub bsde_stage: BsdeStage,
    pub pipeline: Vec<StageKind>,
    pub schedule: Schedule,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    pub dt: f64,
    pub measure: JumpMeasure,
    pub a0: f64,
    pub basis: RegressionBasis,
    pub options: SolverOptions,
    pub target_tol: f64,
    pub epsilon: f64,
    pub hjb_grid: Option<SpatialGrid>,
    pub simulate: SimulateSection,
    pub invariants: InvariantSection,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

fn build_inline(p: &InlineProblem) -> Result<ProblemSpec, ConfigError> {
    let coefficients: Arc<dyn Coefficients> = match &p.coefficients {
        CoefficientsConfig::Zoo(name) => {
            zoo_coefficients(name).ok_or_else(|| ConfigError::UnknownProblem(name.clone()))?
        }
        CoefficientsConfig::Expressions { drift, diffusion, reward } => Arc::new(
            ExprCoefficients::parse(drift, diffusion, reward).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        ),
    };
    let space = match &p.control_space {
        ControlSpaceConfig::Finite(a) => ControlSpace::finite(a.clone()),
        ControlSpaceConfig::Interval([lo, hi]) => ControlSpace::interval(*lo, *hi),
    }
    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let regime = match p.regime {
        RegimeConfig::Bounded { f_sup } => Regime::Bounded { f_sup },
        RegimeConfig::Polynomial { r, m } => Regime::Polynomial { r, m },
    };
    let mut spec = ProblemSpec::new(p.name.clone(), coefficients, p.x0.clone(), space, p.beta, regime, p.lipschitz)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if let Some(s) = &p.summary {
        spec = spec.with_summary(s.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    if let Some(c) = p.bdg_constant {
        spec = spec.with_bdg_constant(c).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    Ok(spec)
}

fn check_pipeline(pipeline: &[StageKind], has_grid: bool) -> Result<(), ConfigError> {
    for (i, s) in pipeline.iter().enumerate() {
        if pipeline[..i].contains(s) {
            return invalid(format!("stage {} listed twice", s.name()));
        }
        let needs: &[StageKind] = match s {
            StageKind::Compare => &[StageKind::SolveBsde, StageKind::SolveHjb],
            StageKind::Invariants => &[StageKind::SolveBsde],
            _ => &[],
        };
        for n in needs {
            if !pipeline[..i].contains(n) {
                return invalid(format!("stage {} needs {} earlier in the pipeline", s.name(), n.name()));
            }
        }
        if *s == StageKind::SolveHjb && !has_grid {
            return invalid("solve-hjb needs a Markovian problem of dimension 1 or 2 and an hjb box");
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let (spec, known_value, bsde_stage, defaults) = match &self.problem {
            ProblemRef::Zoo(name) => {
                let z = zoo_problem(name).ok_or_else(|| ConfigError::UnknownProblem(name.clone()))?;
                (z.spec, z.known_value, z.bsde_stage, Some(z.defaults))
            }
            ProblemRef::Inline(p) => {
                let spec = build_inline(p)?;
                let stage = if spec.is_markovian() {
                    BsdeStage::Markovian
                } else {
                    BsdeStage::SummaryRegression { caveat: "regression on the declared path summary" }
                };
                (spec, None, stage, None)
            }
        };
        let schedule = match &self.schedule {
            Some(st) => Schedule { stages: st.clone() },
            None => Schedule::default_schedule(),
        };
        schedule.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let dt = self.solver.dt.unwrap_or(0.01);
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid("dt must be positive");
        }
        let lambda_total = self.solver.lambda_total.or(defaults.as_ref().map(|d| d.lambda_total)).unwrap_or(16.0);
        let measure = JumpMeasure::uniform(spec.control_space.clone(), lambda_total)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let a0 = match self.solver.a0.or(defaults.as_ref().map(|d| d.a0)) {
            Some(a) => a,
            None => measure.nodes()[0],
        };
        let basis = match (&self.solver.basis, &defaults) {
            (Some(b), _) => b.clone(),
            (None, Some(d)) => d.basis.clone(),
            (None, None) => RegressionBasis::polynomial(3),
        };
        basis.check(spec.summary.dim()).map_err(ConfigError::Invalid)?;
        let base = SolverOptions::default();
        let options = SolverOptions {
            scheme: self.solver.scheme.unwrap_or(base.scheme),
            truncate_to_bounds: self.solver.truncate_to_bounds.unwrap_or(base.truncate_to_bounds),
            compute_z: base.compute_z,
        };
        let target_tol = self.solver.target_tol.unwrap_or(0.0);
        let epsilon = self.solver.epsilon.unwrap_or(0.05);
        if !(epsilon > 0.0) {
            return invalid("epsilon must be positive");
        }
        let hjb_grid = match (&self.hjb, &defaults) {
            (Some(h), _) => {
                if h.lo.len() != spec.dim_state || h.hi.len() != spec.dim_state {
                    return invalid("hjb box dimension differs from the state dimension");
                }
                Some(
                    SpatialGrid::new(h.lo.clone(), h.hi.clone(), vec![h.dx; spec.dim_state])
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                )
            }
            (None, Some(d)) if spec.is_markovian() && spec.dim_state <= 2 => {
                let n = spec.dim_state;
                Some(
                    SpatialGrid::new(vec![d.hjb_box.0; n], vec![d.hjb_box.1; n], vec![d.hjb_dx; n])
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                )
            }
            _ => None,
        };
        let sim = self.simulate;
        if !(sim.horizon > 0.0 && sim.n_paths >= 2) {
            return invalid("simulate needs a positive horizon and at least two paths");
        }
        if self.invariants.n_paths < 2 || !(self.invariants.sigma > 0.0) {
            return invalid("invariants need at least two paths and a positive sigma");
        }
        let pipeline = match &self.pipeline {
            Some(p) => p.clone(),
            None if hjb_grid.is_some() => StageKind::all(),
            None => vec![StageKind::Simulate, StageKind::SolveBsde, StageKind::Invariants],
        };
        check_pipeline(&pipeline, hjb_grid.is_some())?;
        let output_dir = self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out").join(&spec.name));
        Ok(Resolved {
            spec,
            known_value,
            bsde_stage,
            pipeline,
            schedule,
            seeds: self.seeds,
            output_dir,
            dt,
            measure,
            a0,
            basis,
            options,
            target_tol,
            epsilon,
            hjb_grid,
            simulate: sim,
            invariants: self.invariants,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoo_name_only() {
        let c =
            ExperimentConfig::from_json(r#"{"problem": "bangbang-1d", "seeds": {"simulation": 1, "evaluation": 2}}"#)
                .unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.pipeline, StageKind::all());
        assert_eq!(r.a0, -1.0);
        assert!(r.hjb_grid.is_some());
    }

    #[test]
    fn seeds_are_required() {
        assert!(ExperimentConfig::from_json(r#"{"problem": "bangbang-1d"}"#).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let e = ExperimentConfig::from_json(
            r#"{"problem": "bangbang-1d", "seeds": {"simulation": 1, "evaluation": 2}, "colour": 3}"#,
        );
        assert!(e.is_err());
    }

    #[test]
    fn inline_expressions() {
        let c = ExperimentConfig::from_json(
            r#"{
                "problem": {
                    "name": "drifted",
                    "beta": 1.0,
                    "x0": [0.0],
                    "regime": {"kind": "A", "f_sup": 1.0},
                    "lipschitz": 1.0,
                    "control_space": {"interval": [-1.0, 1.0]},
                    "coefficients": {"drift": "a", "diffusion": "1.0", "reward": "-min(math::abs(x), 1.0)"}
                },
                "seeds": {"simulation": 3, "evaluation": 4},
                "pipeline": ["solve-bsde"]
            }"#,
        )
        .unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.spec.name, "drifted");
        assert!(r.hjb_grid.is_none());
        assert_eq!(r.pipeline, vec![StageKind::SolveBsde]);
    }
}
