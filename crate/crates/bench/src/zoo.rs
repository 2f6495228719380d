//! Named test problems with their reference values.

use std::sync::Arc;

use rbsde_core::problem::{Coefficients, ControlSpace, FnCoefficients, ModelResult, ProblemSpec, Regime};
use rbsde_core::regression::RegressionBasis;
use rbsde_core::summary::PathSummarySpec;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ClosedForm,
    HjbOracle,
    BruteForce,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnownValue {
    pub value: f64,
    pub provenance: Provenance,
    pub oracle: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BsdeStage {
    Markovian,
    SummaryRegression { caveat: &'static str },
}

/// Solver settings a zoo problem is tuned for.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZooDefaults {
    pub a0: f64,
    pub lambda_total: f64,
    pub basis: RegressionBasis,
    pub hjb_box: (f64, f64),
    pub hjb_dx: f64,
}

#[derive(Debug, Clone)]
pub struct ZooProblem {
    pub name: &'static str,
    pub description: &'static str,
    pub spec: ProblemSpec,
    pub known_value: Option<KnownValue>,
    pub bsde_stage: BsdeStage,
    pub defaults: ZooDefaults,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZooSummary {
    pub name: &'static str,
    pub description: &'static str,
    pub dim_state: usize,
    pub actions: String,
    pub beta: f64,
    pub x0: Vec<f64>,
    pub known_value: Option<KnownValue>,
    pub oracle: &'static str,
    pub bsde_stage: BsdeStage,
}

pub const NAMES: [&str; 5] = ["constant-reward", "singleton-ou", "bangbang-1d", "controlled-vol-1d", "memory-drift"];

/// Closed-form ∫₀^∞ e^{−βt} E[X_t²] dt for dX = −X dt + dW from x0.
pub fn ou_discounted_second_moment(x0: f64, beta: f64) -> f64 {
    x0 * x0 / (beta + 2.0) + 1.0 / (beta * (beta + 2.0))
}

/// v(0) for b = a ∈ {−1, 1}, σ = 1, f = −|x|, β = 1.
pub fn bangbang_value_at_zero() -> f64 {
    (1.0 - 3f64.sqrt()) / 2.0
}

fn markov_1d(
    name: &str,
    c: FnCoefficients,
    x0: f64,
    actions: Vec<f64>,
    beta: f64,
    f_sup: f64,
    l: f64,
) -> ModelResult<ProblemSpec> {
    ProblemSpec::new(name, Arc::new(c), vec![x0], ControlSpace::finite(actions)?, beta, Regime::Bounded { f_sup }, l)
}

/// Coefficients of a zoo problem by name, for inline specs that reuse them.
pub fn zoo_coefficients(name: &str) -> Option<Arc<dyn Coefficients>> {
    zoo_problem(name).map(|z| z.spec.coefficients.clone())
}

pub fn zoo_problem(name: &str) -> Option<ZooProblem> {
    let tents = |lo: f64, hi: f64, cells: usize| RegressionBasis::tents_1d(lo, hi, cells);
    let defaults = |a0: f64, basis: RegressionBasis| ZooDefaults {
        a0,
        lambda_total: 16.0,
        basis,
        hjb_box: (-6.0, 6.0),
        hjb_dx: 0.01,
    };
    let p = match name {
        "constant-reward" => ZooProblem {
            name: "constant-reward",
            description: "f = 1, b = a, sigma = 1, A = {-1, 1}, beta = 0.5",
            spec: markov_1d(
                name,
                FnCoefficients::scalar(|_, _, a| a, |_, _, _| 1.0, |_, _, _| 1.0),
                0.0,
                vec![-1.0, 1.0],
                0.5,
                1.0,
                1.0,
            )
            .ok()?,
            known_value: Some(KnownValue { value: 2.0, provenance: Provenance::ClosedForm, oracle: "c / beta" }),
            bsde_stage: BsdeStage::Markovian,
            defaults: defaults(-1.0, tents(-4.0, 4.0, 64)),
        },
        "singleton-ou" => ZooProblem {
            name: "singleton-ou",
            description: "A = {0}, b = -x, sigma = 1, f = -min(x^2, 36), beta = 1, x0 = 1",
            spec: markov_1d(
                name,
                FnCoefficients::scalar(|_, s, _| -s[0], |_, _, _| 1.0, |_, s, _| -(s[0] * s[0]).min(36.0)),
                1.0,
                vec![0.0],
                1.0,
                36.0,
                1.0,
            )
            .ok()?,
            known_value: Some(KnownValue {
                value: -ou_discounted_second_moment(1.0, 1.0),
                provenance: Provenance::ClosedForm,
                oracle: "discounted OU second moment x0^2/(beta+2) + 1/(beta(beta+2)); the cap at 36 moves it by less than 1e-12",
            }),
            bsde_stage: BsdeStage::Markovian,
            defaults: defaults(0.0, tents(-4.0, 4.0, 64)),
        },
        "bangbang-1d" => ZooProblem {
            name: "bangbang-1d",
            description: "b = a in {-1, 1}, sigma = 1, f = -min(|x|, 6), beta = 1, x0 = 0",
            spec: markov_1d(
                name,
                FnCoefficients::scalar(|_, _, a| a, |_, _, _| 1.0, |_, s, _| -s[0].abs().min(6.0)),
                0.0,
                vec![-1.0, 1.0],
                1.0,
                6.0,
                1.0,
            )
            .ok()?,
            known_value: Some(KnownValue {
                value: bangbang_value_at_zero(),
                provenance: Provenance::ClosedForm,
                oracle: "v(x) = 1 - |x| + exp((1 - sqrt 3)|x|)/(1 - sqrt 3) solves the HJB with the bang-bang feedback a = -sign(x)",
            }),
            bsde_stage: BsdeStage::Markovian,
            defaults: defaults(-1.0, tents(-4.0, 4.0, 64)),
        },
        "controlled-vol-1d" => ZooProblem {
            name: "controlled-vol-1d",
            description: "b = 0, sigma = a in {0.5, 1.5}, f = -min(x^2, 36), beta = 1, x0 = 0",
            spec: markov_1d(
                name,
                FnCoefficients::scalar(|_, _, _| 0.0, |_, _, a| a, |_, s, _| -(s[0] * s[0]).min(36.0)),
                0.0,
                vec![0.5, 1.5],
                1.0,
                36.0,
                1.5,
            )
            .ok()?,
            known_value: Some(KnownValue {
                value: -0.25,
                provenance: Provenance::HjbOracle,
                oracle: "policy iteration on [-6, 6] with dx = 0.01 selects sigma = 0.5 everywhere; u(0) = -sigma^2/beta^2",
            }),
            bsde_stage: BsdeStage::Markovian,
            defaults: defaults(0.5, tents(-6.0, 6.0, 48)),
        },
        "memory-drift" => {
            let c = FnCoefficients::new(
                1,
                1,
                |_, s, a, out| out[0] = a - s[1],
                |_, _, _, out| out[0] = 0.5,
                |_, s, _| -(s[0] * s[0]).min(4.0),
            );
            let spec = ProblemSpec::new(
                name,
                Arc::new(c),
                vec![1.0],
                ControlSpace::finite(vec![-0.5, 0.0, 0.5]).ok()?,
                1.0,
                Regime::Bounded { f_sup: 4.0 },
                1.0,
            )
            .ok()?
            .with_summary(PathSummarySpec { dim_state: 1, running_sup: false, running_mean: true, lags: vec![] })
            .ok()?;
            ZooProblem {
                name: "memory-drift",
                description: "b = a - (running mean of X), sigma = 0.5, f = -min(x^2, 4), A = {-0.5, 0, 0.5}, beta = 1, x0 = 1",
                spec,
                known_value: None,
                bsde_stage: BsdeStage::SummaryRegression {
                    caveat: "the value is regressed on (x, running mean); the summary is exact for the coefficients but the regression fidelity is not checked against an oracle",
                },
                defaults: ZooDefaults {
                    a0: 0.0,
                    lambda_total: 16.0,
                    basis: RegressionBasis::polynomial(3),
                    hjb_box: (-6.0, 6.0),
                    hjb_dx: 0.01,
                },
            }
        }
        _ => return None,
    };
    Some(p)
}

pub fn zoo_list() -> Vec<ZooSummary> {
    NAMES
        .iter()
        .filter_map(|n| zoo_problem(n))
        .map(|z| ZooSummary {
            name: z.name,
            description: z.description,
            dim_state: z.spec.dim_state,
            actions: format!("{:?}", z.spec.control_space.discretize(0)),
            beta: z.spec.beta,
            x0: z.spec.x0.clone(),
            oracle: match &z.known_value {
                Some(k) => match k.provenance {
                    Provenance::ClosedForm => "closed-form",
                    Provenance::HjbOracle => "hjb-oracle",
                    Provenance::BruteForce => "brute-force",
                },
                None => "none",
            },
            known_value: z.known_value,
            bsde_stage: z.bsde_stage,
        })
        .collect()
}
