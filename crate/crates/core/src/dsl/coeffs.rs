use serde::{Deserialize, Serialize};

use super::expr::{Expr, Var, VarSet};
use super::parser::parse_expr;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ModelKind {
    /// Heat equation for `u` forced by the slow particle, no fast field.
    I,
    /// Slow and fast fields coupled to the particle pair.
    II,
}

impl TryFrom<u8> for ModelKind {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(ModelKind::I),
            2 => Ok(ModelKind::II),
            other => Err(format!("model must be 1 or 2, got {other}")),
        }
    }
}

impl From<ModelKind> for u8 {
    fn from(m: ModelKind) -> u8 {
        match m {
            ModelKind::I => 1,
            ModelKind::II => 2,
        }
    }
}

fn zero_text() -> String {
    "0".to_string()
}

/// Coefficient expressions as text, the form they take in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    #[serde(default = "zero_text")]
    pub f: String,
    #[serde(default = "zero_text")]
    pub g: String,
    #[serde(default = "zero_text")]
    pub b: String,
    #[serde(rename = "B", default = "zero_text")]
    pub big_b: String,
    #[serde(default = "zero_text")]
    pub sigma1: String,
    #[serde(default = "zero_text")]
    pub sigma2: String,
    #[serde(default = "zero_text")]
    pub sigma3: String,
    #[serde(default = "zero_text")]
    pub sigma4: String,
}

/// User-declared constants of the coefficient hypotheses. Only falsified,
/// never estimated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    #[serde(rename = "K_f", default, skip_serializing_if = "Option::is_none")]
    pub k_f: Option<f64>,
    #[serde(rename = "C_f", default, skip_serializing_if = "Option::is_none")]
    pub c_f: Option<f64>,
    #[serde(rename = "K_sigma1", default, skip_serializing_if = "Option::is_none")]
    pub k_sigma1: Option<f64>,
    #[serde(rename = "K_g", default, skip_serializing_if = "Option::is_none")]
    pub k_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(rename = "K_sigma2", default, skip_serializing_if = "Option::is_none")]
    pub k_sigma2: Option<f64>,
    #[serde(rename = "C_sigma2", default, skip_serializing_if = "Option::is_none")]
    pub c_sigma2: Option<f64>,
    #[serde(rename = "K_b", default, skip_serializing_if = "Option::is_none")]
    pub k_b: Option<f64>,
    #[serde(rename = "C_b", default, skip_serializing_if = "Option::is_none")]
    pub c_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(rename = "K_sigma3", default, skip_serializing_if = "Option::is_none")]
    pub k_sigma3: Option<f64>,
    #[serde(rename = "C_sigma3", default, skip_serializing_if = "Option::is_none")]
    pub c_sigma3: Option<f64>,
    #[serde(rename = "K_B", default, skip_serializing_if = "Option::is_none")]
    pub k_big_b: Option<f64>,
    #[serde(rename = "C_B", default, skip_serializing_if = "Option::is_none")]
    pub c_big_b: Option<f64>,
    #[serde(rename = "K_sigma4", default, skip_serializing_if = "Option::is_none")]
    pub k_sigma4: Option<f64>,
    #[serde(rename = "C_sigma4", default, skip_serializing_if = "Option::is_none")]
    pub c_sigma4: Option<f64>,
}

impl Constants {
    fn named(&self) -> [(&'static str, Option<f64>); 16] {
        [
            ("K_f", self.k_f),
            ("C_f", self.c_f),
            ("K_sigma1", self.k_sigma1),
            ("K_g", self.k_g),
            ("alpha", self.alpha),
            ("K_sigma2", self.k_sigma2),
            ("C_sigma2", self.c_sigma2),
            ("K_b", self.k_b),
            ("C_b", self.c_b),
            ("beta", self.beta),
            ("K_sigma3", self.k_sigma3),
            ("C_sigma3", self.c_sigma3),
            ("K_B", self.k_big_b),
            ("C_B", self.c_big_b),
            ("K_sigma4", self.k_sigma4),
            ("C_sigma4", self.c_sigma4),
        ]
    }

    pub fn required(model: ModelKind) -> &'static [&'static str] {
        match model {
            ModelKind::I => &[
                "K_f", "K_b", "C_b", "beta", "K_B", "C_B", "K_sigma3", "C_sigma3", "K_sigma4", "C_sigma4",
            ],
            ModelKind::II => &[
                "K_f", "C_f", "K_sigma1", "K_g", "alpha", "K_sigma2", "C_sigma2", "K_b", "C_b", "beta",
                "K_sigma3", "C_sigma3", "K_B", "C_B", "K_sigma4", "C_sigma4",
            ],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.named().into_iter().find(|(n, _)| *n == name).and_then(|(_, v)| v)
    }

    pub fn validate(&self, model: ModelKind) -> Result<()> {
        for (name, value) in self.named() {
            if let Some(v) = value {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("constant {name} must be a nonnegative number, got {v}")));
                }
            }
        }
        let missing: Vec<_> =
            Self::required(model).iter().filter(|n| self.get(n).is_none()).copied().collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing declared constants: {}", missing.join(", "))));
        }
        Ok(())
    }

    /// `2λ₁ + 2α − K_σ2`, the contraction rate of the frozen fast equation.
    pub fn kappa(&self, lambda1: f64) -> Option<f64> {
        Some(2.0 * lambda1 + 2.0 * self.alpha? - self.k_sigma2?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSet {
    pub f: Expr,
    pub g: Expr,
    pub b: Expr,
    pub big_b: Expr,
    pub sigma1: Expr,
    pub sigma2: Expr,
    pub sigma3: Expr,
    pub sigma4: Expr,
    pub constants: Constants,
}

/// Variables each coefficient may reference.
pub fn allowed_vars(name: &str, model: ModelKind) -> VarSet {
    use Var::*;
    match (name, model) {
        ("f", ModelKind::I) => VarSet::of(&[U, Xi, X]),
        ("f" | "g", _) => VarSet::of(&[U, V, Xi, X]),
        ("b" | "B" | "sigma4", _) => VarSet::of(&[Xi, Eta]),
        ("sigma1", _) => VarSet::of(&[U]),
        ("sigma2", _) => VarSet::of(&[U, V]),
        ("sigma3", _) => VarSet::of(&[Xi]),
        _ => VarSet(0),
    }
}

/// Parse `text` and require its variables to lie in `allowed`.
pub fn parse_restricted(label: &str, text: &str, allowed: VarSet) -> Result<Expr> {
    let e = parse_expr(text).map_err(|err| Error::Config(format!("{label} = \"{text}\": {err}")))?;
    if !e.vars().is_subset(allowed) {
        return Err(Error::Config(format!(
            "{label} = \"{text}\" references {} but may only use {allowed}",
            e.vars()
        )));
    }
    Ok(e)
}

impl CoefficientSet {
    pub fn parse(spec: &CoefficientSpec, constants: Constants, model: ModelKind) -> Result<Self> {
        let p = |name: &str, text: &str| parse_restricted(name, text, allowed_vars(name, model));
        let set = CoefficientSet {
            f: p("f", &spec.f)?,
            g: p("g", &spec.g)?,
            b: p("b", &spec.b)?,
            big_b: p("B", &spec.big_b)?,
            sigma1: p("sigma1", &spec.sigma1)?,
            sigma2: p("sigma2", &spec.sigma2)?,
            sigma3: p("sigma3", &spec.sigma3)?,
            sigma4: p("sigma4", &spec.sigma4)?,
            constants,
        };
        if model == ModelKind::I {
            for (name, e) in [("g", &set.g), ("sigma1", &set.sigma1), ("sigma2", &set.sigma2)] {
                if !e.is_zero_constant() {
                    return Err(Error::Config(format!("{name} is not part of model 1 and must be 0")));
                }
            }
        }
        set.constants.validate(model)?;
        Ok(set)
    }

    /// Model-agnostic construction used by tests and library callers; checks
    /// only the per-coefficient variable restrictions of model 2.
    pub fn from_exprs(spec: &CoefficientSpec) -> Result<Self> {
        let p = |name: &str, text: &str| parse_restricted(name, text, allowed_vars(name, ModelKind::II));
        Ok(CoefficientSet {
            f: p("f", &spec.f)?,
            g: p("g", &spec.g)?,
            b: p("b", &spec.b)?,
            big_b: p("B", &spec.big_b)?,
            sigma1: p("sigma1", &spec.sigma1)?,
            sigma2: p("sigma2", &spec.sigma2)?,
            sigma3: p("sigma3", &spec.sigma3)?,
            sigma4: p("sigma4", &spec.sigma4)?,
            constants: Constants::default(),
        })
    }

    /// The same coefficients with every diffusion coefficient set to zero.
    pub fn deterministic(&self) -> Self {
        CoefficientSet {
            sigma1: Expr::zero(),
            sigma2: Expr::zero(),
            sigma3: Expr::zero(),
            sigma4: Expr::zero(),
            ..self.clone()
        }
    }
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec {
            f: zero_text(),
            g: zero_text(),
            b: zero_text(),
            big_b: zero_text(),
            sigma1: zero_text(),
            sigma2: zero_text(),
            sigma3: zero_text(),
            sigma4: zero_text(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arity_discipline() {
        let spec = CoefficientSpec { b: "sin(xi) + u".into(), ..Default::default() };
        let err = CoefficientSet::from_exprs(&spec).unwrap_err();
        assert!(err.to_string().contains("may only use"), "{err}");

        let spec = CoefficientSpec { f: "v".into(), ..Default::default() };
        let consts = Constants { k_f: Some(1.0), ..full_model1_constants() };
        assert!(CoefficientSet::parse(&spec, consts, ModelKind::I).is_err());
    }

    fn full_model1_constants() -> Constants {
        Constants {
            k_f: Some(1.0),
            k_b: Some(1.0),
            c_b: Some(1.0),
            beta: Some(1.0),
            k_big_b: Some(1.0),
            c_big_b: Some(1.0),
            k_sigma3: Some(1.0),
            c_sigma3: Some(1.0),
            k_sigma4: Some(1.0),
            c_sigma4: Some(1.0),
            ..Default::default()
        }
    }

    #[test]
    fn required_constants() {
        let spec = CoefficientSpec { f: "tanh(u)".into(), ..Default::default() };
        assert!(CoefficientSet::parse(&spec, full_model1_constants(), ModelKind::I).is_ok());
        let err = CoefficientSet::parse(&spec, full_model1_constants(), ModelKind::II).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        let bad = Constants { beta: None, ..full_model1_constants() };
        assert!(CoefficientSet::parse(&spec, bad, ModelKind::I).is_err());
        let neg = Constants { beta: Some(-1.0), ..full_model1_constants() };
        assert!(CoefficientSet::parse(&spec, neg, ModelKind::I).is_err());
    }
}
