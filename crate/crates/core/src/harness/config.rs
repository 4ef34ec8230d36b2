//! Experiment configuration: TOML schema, validation and shipped presets.

use serde::{Deserialize, Serialize};

use crate::dsl::{parse_restricted, CoefficientSet, CoefficientSpec, Constants, ModelKind, SamplingBox, VarSet};
use crate::dsl::Var;
use crate::error::{Error, Result};
use crate::numerics::{eval_on_grid, step_count, EigenBasis, Field, GridArgs};
use crate::sde::{ErgodicParams, FastScale};

/// Block length of the auxiliary partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaPolicy {
    /// `δ = ε √(−ln ε)`.
    Schedule,
    Fixed(f64),
}

/// Evaluation of `f̄` in the two-field model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FbarMode {
    ClosedForm { expr: String },
    LinearElliptic,
    Ergodic {
        t_avg: f64,
        #[serde(default)]
        burn_in: f64,
        replicas: usize,
        step: f64,
    },
}

/// Evaluation of `b̄`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BbarMode {
    ClosedForm {
        expr: String,
    },
    /// Tabulated on `nodes` equispaced points of `[lo, hi]`.
    Ergodic {
        t_avg: f64,
        #[serde(default)]
        burn_in: f64,
        replicas: usize,
        step: f64,
        lo: f64,
        hi: f64,
        nodes: usize,
    },
}

impl BbarMode {
    pub fn params(&self) -> Option<ErgodicParams> {
        match self {
            BbarMode::ClosedForm { .. } => None,
            BbarMode::Ergodic { t_avg, burn_in, replicas, step, .. } => {
                Some(ErgodicParams { t_avg: *t_avg, burn_in: *burn_in, replicas: *replicas, step: *step })
            }
        }
    }

    pub fn grid(&self) -> Option<Vec<f64>> {
        match self {
            BbarMode::ClosedForm { .. } => None,
            BbarMode::Ergodic { lo, hi, nodes, .. } => {
                Some((0..*nodes).map(|i| lo + (hi - lo) * i as f64 / (*nodes - 1) as f64).collect())
            }
        }
    }
}

/// Initial data; `u0` and `v0` are expressions in `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default = "zero_text")]
    pub u0: String,
    #[serde(default = "zero_text")]
    pub v0: String,
    #[serde(default)]
    pub xi0: f64,
    #[serde(default)]
    pub eta0: f64,
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec { u0: zero_text(), v0: zero_text(), xi0: 0.0, eta0: 0.0 }
    }
}

fn zero_text() -> String {
    "0".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionParams {
    pub t_final: f64,
    pub step: f64,
    pub replicas: usize,
    /// Second initial fast field, an expression in `x`.
    pub v0_other: String,
}

impl Default for ContractionParams {
    fn default() -> Self {
        ContractionParams { t_final: 0.1, step: 0.001, replicas: 20, v0_other: "sin(pi*x)".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderParams {
    /// Diffusion of the slow field used for this check.
    pub sigma1: String,
    pub epsilon: f64,
    pub step: f64,
    pub t_final: f64,
    pub t0: f64,
    pub lags: Vec<f64>,
    pub replicas: usize,
}

impl Default for HolderParams {
    fn default() -> Self {
        HolderParams {
            sigma1: "1".into(),
            epsilon: 0.02,
            step: 1.0 / 1024.0,
            t_final: 0.5,
            t0: 0.25,
            lags: (4..=8).rev().map(|k| 0.5f64.powi(k)).collect(),
            replicas: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyParams {
    /// Deterministic slow drift in `u` and `x`.
    pub f: String,
    pub t_final: f64,
    /// Successively halved steps.
    pub steps: Vec<f64>,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams { f: "2*tanh(u)".into(), t_final: 1.0, steps: vec![0.02, 0.01, 0.005, 0.0025] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbarOracleParams {
    pub t_avg: f64,
    pub burn_in: f64,
    pub replicas: usize,
    pub step: f64,
    /// Modes compared individually against the oracle.
    pub modes: usize,
}

impl Default for FbarOracleParams {
    fn default() -> Self {
        FbarOracleParams { t_avg: 100.0, burn_in: 1.0, replicas: 16, step: 0.01, modes: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentParams {
    pub replicas: usize,
}

impl Default for MomentParams {
    fn default() -> Self {
        MomentParams { replicas: 50 }
    }
}

/// Parameters of the diagnostic check suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckParams {
    #[serde(default = "default_sample_budget")]
    pub sample_budget: usize,
    #[serde(default, rename = "box")]
    pub sampling_box: SamplingBox,
    #[serde(default)]
    pub contraction: ContractionParams,
    #[serde(default)]
    pub holder: HolderParams,
    #[serde(default)]
    pub energy: EnergyParams,
    #[serde(default)]
    pub fbar_oracle: FbarOracleParams,
    #[serde(default)]
    pub moments: MomentParams,
}

fn default_sample_budget() -> usize {
    2000
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            sample_budget: default_sample_budget(),
            sampling_box: SamplingBox::default(),
            contraction: ContractionParams::default(),
            holder: HolderParams::default(),
            energy: EnergyParams::default(),
            fbar_oracle: FbarOracleParams::default(),
            moments: MomentParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub model: ModelKind,
    #[serde(default = "d_modes")]
    pub n_modes: usize,
    #[serde(default = "d_grid")]
    pub grid_points: usize,
    #[serde(default = "d_one")]
    pub t_final: f64,
    #[serde(default = "d_macro")]
    pub macro_step: f64,
    #[serde(default = "d_rho")]
    pub rho: f64,
    #[serde(default = "d_eps")]
    pub epsilons: Vec<f64>,
    #[serde(default = "d_replicas")]
    pub replicas: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_delta")]
    pub delta: DeltaPolicy,
    /// Threshold of the sup-probability and the Chebyshev column.
    #[serde(default = "d_tol")]
    pub delta_tol: f64,
    /// Hölder exponent used in the bound shape column.
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Refuse runs whose cost estimate exceeds this many seconds.
    #[serde(default = "d_budget")]
    pub budget_seconds: f64,
    #[serde(default = "d_output")]
    pub output: String,
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub constants: Constants,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fbar: Option<FbarMode>,
    pub bbar: BbarMode,
    #[serde(default)]
    pub checks: CheckParams,
}

fn d_modes() -> usize {
    32
}
fn d_grid() -> usize {
    128
}
fn d_one() -> f64 {
    1.0
}
fn d_macro() -> f64 {
    0.01
}
fn d_rho() -> f64 {
    0.1
}
fn d_eps() -> Vec<f64> {
    vec![0.5, 0.1, 0.02]
}
fn d_replicas() -> usize {
    200
}
fn d_seed() -> u64 {
    12345
}
fn d_delta() -> DeltaPolicy {
    DeltaPolicy::Schedule
}
fn d_tol() -> f64 {
    0.05
}
fn d_gamma() -> f64 {
    0.4
}
fn d_budget() -> f64 {
    600.0
}
fn d_output() -> String {
    "out".into()
}

pub const MODEL1_PRESET: &str = include_str!("../../presets/model1.toml");
pub const MODEL2_LINEAR_PRESET: &str = include_str!("../../presets/model2_linear.toml");

/// Named presets shipped with the crate.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "model1" => Some(MODEL1_PRESET),
        "model2_linear" => Some(MODEL2_LINEAR_PRESET),
        _ => None,
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    /// Parse and validate.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        if self.n_modes == 0 || self.grid_points < self.n_modes {
            return Err(Error::Config(format!(
                "need 1 <= n_modes <= grid_points, got {} and {}",
                self.n_modes, self.grid_points
            )));
        }
        positive("t_final", self.t_final)?;
        positive("macro_step", self.macro_step)?;
        positive("delta_tol", self.delta_tol)?;
        positive("budget_seconds", self.budget_seconds)?;
        if !(self.gamma > 0.0 && self.gamma < 0.5) {
            return Err(Error::Config(format!("gamma must lie in (0, 1/2), got {}", self.gamma)));
        }
        step_count(self.t_final, self.macro_step).map_err(|e| Error::Config(e.to_string()))?;
        if self.epsilons.is_empty() {
            return Err(Error::Config("epsilon list is empty".into()));
        }
        for &eps in &self.epsilons {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::Config(format!("epsilon must lie in (0, 1), got {eps}")));
            }
            FastScale::new(eps, self.rho).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let DeltaPolicy::Fixed(d) = self.delta {
            if !(d > 0.0 && d <= self.t_final) {
                return Err(Error::Config(format!("fixed delta must lie in (0, T], got {d}")));
            }
        }
        self.coefficient_set()?;
        self.initial_fields()?;
        match (&self.fbar, self.model) {
            (None, ModelKind::II) => return Err(Error::Config("model 2 needs an [fbar] section".into())),
            (Some(_), ModelKind::I) => return Err(Error::Config("[fbar] is not used by model 1".into())),
            (Some(FbarMode::ClosedForm { expr }), _) => {
                parse_restricted("fbar", expr, VarSet::of(&[Var::U, Var::Xi, Var::X]))?;
            }
            (Some(FbarMode::LinearElliptic), _) => {
                crate::spde::AveragedField::linear_elliptic(&self.coefficient_set()?)?;
            }
            (Some(FbarMode::Ergodic { t_avg, burn_in, replicas, step }), _) => {
                ErgodicParams { t_avg: *t_avg, burn_in: *burn_in, replicas: *replicas, step: *step }
                    .validate()
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
            (None, ModelKind::I) => {}
        }
        match &self.bbar {
            BbarMode::ClosedForm { expr } => {
                parse_restricted("bbar", expr, VarSet::of(&[Var::Xi]))?;
            }
            BbarMode::Ergodic { lo, hi, nodes, .. } => {
                if !(lo < hi) || *nodes < 2 {
                    return Err(Error::Config("bbar tabulation needs lo < hi and at least 2 nodes".into()));
                }
                self.bbar.params().unwrap().validate().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn coefficient_set(&self) -> Result<CoefficientSet> {
        CoefficientSet::parse(&self.coefficients, self.constants.clone(), self.model)
    }

    pub fn basis(&self) -> Result<EigenBasis> {
        EigenBasis::new(self.n_modes, self.grid_points)
    }

    /// `u0` and `v0` projected on the basis (`v0` for model 2 only).
    pub fn initial_fields(&self) -> Result<(Field, Option<Field>)> {
        let basis = self.basis()?;
        let field = |label: &str, text: &str| -> Result<Field> {
            let e = parse_restricted(label, text, VarSet::of(&[Var::X]))?;
            basis.project(&eval_on_grid(&basis, &e, &GridArgs::default())?)
        };
        let u0 = field("u0", &self.initial.u0)?;
        let v0 = match self.model {
            ModelKind::I => None,
            ModelKind::II => Some(field("v0", &self.initial.v0)?),
        };
        Ok((u0, v0))
    }

    pub fn delta_for(&self, eps: f64) -> Result<f64> {
        match self.delta {
            DeltaPolicy::Schedule => crate::averaging::delta_schedule(eps).map(|d| d.min(self.t_final)),
            DeltaPolicy::Fixed(d) => Ok(d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_round_trip() {
        for name in ["model1", "model2_linear"] {
            let cfg = ExperimentConfig::from_toml(preset(name).unwrap()).unwrap();
            let text = cfg.to_toml().unwrap();
            let again = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(text, again.to_toml().unwrap());
        }
    }

    #[test]
    fn zero_replicas_is_rejected() {
        let text = format!("{}\nreplicas = 0\n", preset("model1").unwrap().replace("replicas = 200", ""));
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_expressions_are_rejected() {
        let base = preset("model2_linear").unwrap();
        assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{base}")).is_err());
        let bad = base.replace("f = \"v\"", "f = \"v*(\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let wrong_vars = base.replace("sigma1 = \"0.5\"", "sigma1 = \"v\"");
        assert!(ExperimentConfig::from_toml(&wrong_vars).is_err());
    }

    #[test]
    fn step_constraints_are_checked() {
        let base = preset("model2_linear").unwrap();
        assert!(ExperimentConfig::from_toml(&base.replace("rho = 0.1", "rho = 0.7")).is_err());
        assert!(ExperimentConfig::from_toml(&base.replace("macro_step = 0.01", "macro_step = 0.3")).is_err());
    }

    #[test]
    fn delta_policies() {
        let mut cfg = ExperimentConfig::from_toml(preset("model2_linear").unwrap()).unwrap();
        assert!((cfg.delta_for(0.01).unwrap() - 0.01 * 100f64.ln().sqrt()).abs() < 1e-15);
        cfg.delta = DeltaPolicy::Fixed(0.05);
        assert_eq!(cfg.delta_for(0.01).unwrap(), 0.05);
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("fixed = 0.05"), "{text}");
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}
