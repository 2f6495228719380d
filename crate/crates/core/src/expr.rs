//! Scalar coefficients given as expression strings in x, a and t.

use evalexpr::{build_operator_tree, Context, DefaultNumericTypes, EvalexprError, EvalexprResult, Node, Value};

use crate::problem::{Coefficients, ModelError, ModelResult};

struct Vars {
    x: Value<DefaultNumericTypes>,
    a: Value<DefaultNumericTypes>,
    t: Value<DefaultNumericTypes>,
}

impl Context for Vars {
    type NumericTypes = DefaultNumericTypes;

    fn get_value(&self, identifier: &str) -> Option<&Value<Self::NumericTypes>> {
        match identifier {
            "x" => Some(&self.x),
            "a" => Some(&self.a),
            "t" => Some(&self.t),
            _ => None,
        }
    }

    fn call_function(
        &self,
        identifier: &str,
        argument: &Value<Self::NumericTypes>,
    ) -> EvalexprResult<Value<Self::NumericTypes>, Self::NumericTypes> {
        Err(EvalexprError::FunctionIdentifierNotFound(format!("{identifier}({argument})")))
    }

    fn are_builtin_functions_disabled(&self) -> bool {
        false
    }

    fn set_builtin_functions_disabled(&mut self, disabled: bool) -> EvalexprResult<(), Self::NumericTypes> {
        if disabled {
            Err(EvalexprError::BuiltinFunctionsCannotBeDisabled)
        } else {
            Ok(())
        }
    }
}

/// A compiled expression in the variables `x`, `a` and `t`.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    tree: Node<DefaultNumericTypes>,
}

impl Expr {
    pub fn parse(source: &str) -> ModelResult<Self> {
        let tree = build_operator_tree::<DefaultNumericTypes>(source)
            .map_err(|e| ModelError::Expression(format!("{source:?}: {e}")))?;
        for id in tree.iter_variable_identifiers() {
            if !matches!(id, "x" | "a" | "t") {
                return Err(ModelError::Expression(format!("{source:?}: unknown variable {id:?}")));
            }
        }
        let e = Expr { source: source.to_string(), tree };
        e.eval(0.0, 0.0, 0.0)?;
        Ok(e)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, t: f64, x: f64, a: f64) -> ModelResult<f64> {
        let ctx = Vars { x: Value::Float(x), a: Value::Float(a), t: Value::Float(t) };
        self.tree.eval_number_with_context(&ctx).map_err(|e| ModelError::Expression(format!("{:?}: {e}", self.source)))
    }
}

/// One-dimensional coefficients b, σ and f from expressions.
#[derive(Debug, Clone)]
pub struct ExprCoefficients {
    pub drift: Expr,
    pub diffusion: Expr,
    pub reward: Expr,
}

impl ExprCoefficients {
    pub fn parse(drift: &str, diffusion: &str, reward: &str) -> ModelResult<Self> {
        Ok(ExprCoefficients {
            drift: Expr::parse(drift)?,
            diffusion: Expr::parse(diffusion)?,
            reward: Expr::parse(reward)?,
        })
    }
}

impl Coefficients for ExprCoefficients {
    fn dim_state(&self) -> usize {
        1
    }

    fn dim_noise(&self) -> usize {
        1
    }

    fn drift(&self, t: f64, s: &[f64], a: f64, out: &mut [f64]) {
        out[0] = self.drift.eval(t, s[0], a).unwrap_or(f64::NAN);
    }

    fn diffusion(&self, t: f64, s: &[f64], a: f64, out: &mut [f64]) {
        out[0] = self.diffusion.eval(t, s[0], a).unwrap_or(f64::NAN);
    }

    fn reward(&self, t: f64, s: &[f64], a: f64) -> f64 {
        self.reward.eval(t, s[0], a).unwrap_or(f64::NAN)
    }
}
