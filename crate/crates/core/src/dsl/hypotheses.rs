//! Random-sampling falsification of the declared coefficient constants.
//!
//! Every inequality is checked in the squared form the constants are declared
//! in, e.g. `|f(a) − f(b)|² ≤ K_f (|Δu|² + |Δv|² + |Δξ|²)`. "Consistent" only
//! means no violation was found among the sampled points.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coeffs::{CoefficientSet, ModelKind};
use super::expr::{Env, Expr, Var};
use crate::numerics::EigenBasis;

const REL_TOL: f64 = 1e-9;
const ABS_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBox {
    pub u: [f64; 2],
    pub v: [f64; 2],
    pub xi: [f64; 2],
    pub eta: [f64; 2],
}

impl Default for SamplingBox {
    fn default() -> Self {
        SamplingBox { u: [-5.0, 5.0], v: [-5.0, 5.0], xi: [-5.0, 5.0], eta: [-5.0, 5.0] }
    }
}

impl SamplingBox {
    fn range(&self, v: Var) -> [f64; 2] {
        match v {
            Var::U => self.u,
            Var::V => self.v,
            Var::Xi => self.xi,
            Var::Eta => self.eta,
            Var::X => [0.0, 1.0],
        }
    }
}

/// A sampled point that reproduces a violation.
#[derive(Clone, Debug, PartialEq)]
pub struct Witness {
    pub point: Vec<(Var, f64)>,
    pub other: Option<Vec<(Var, f64)>>,
    pub lhs: f64,
    pub rhs: f64,
    pub note: Option<String>,
}

impl fmt::Display for Witness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |p: &[(Var, f64)]| {
            p.iter().map(|(v, x)| format!("{}={x}", v.name())).collect::<Vec<_>>().join(", ")
        };
        write!(f, "at ({})", show(&self.point))?;
        if let Some(o) = &self.other {
            write!(f, " vs ({})", show(o))?;
        }
        write!(f, ": {} > {}", self.lhs, self.rhs)?;
        if let Some(n) = &self.note {
            write!(f, " [{n}]")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Verdict {
    Consistent,
    Falsified(Witness),
}

impl Verdict {
    pub fn is_consistent(&self) -> bool {
        matches!(self, Verdict::Consistent)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisCheck {
    pub hypothesis: &'static str,
    pub description: String,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisReport {
    pub checks: Vec<HypothesisCheck>,
    /// `2λ₁ + 2α − K_σ2`, model 2 only.
    pub h5_margin: Option<f64>,
}

impl HypothesisReport {
    pub fn all_consistent(&self) -> bool {
        self.checks.iter().all(|c| c.verdict.is_consistent()) && self.h5_margin.is_none_or(|m| m > 0.0)
    }

    pub fn falsified(&self) -> impl Iterator<Item = &HypothesisCheck> {
        self.checks.iter().filter(|c| !c.verdict.is_consistent())
    }
}

impl fmt::Display for HypothesisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            match &c.verdict {
                Verdict::Consistent => writeln!(f, "{} {}: consistent", c.hypothesis, c.description)?,
                Verdict::Falsified(w) => writeln!(f, "{} {}: FALSIFIED {w}", c.hypothesis, c.description)?,
            }
        }
        if let Some(m) = self.h5_margin {
            let tag = if m > 0.0 { "consistent" } else { "FALSIFIED" };
            writeln!(f, "H5 2*lambda1 + 2*alpha - K_sigma2 = {m}: {tag}")?;
        }
        Ok(())
    }
}

enum Kind<'a> {
    /// `|e(a) − e(b)|² ≤ K Σ_{w ∈ wrt} |a_w − b_w|²`
    Lipschitz { wrt: &'a [Var], k: f64 },
    /// `|e(a)|² ≤ K (1 + Σ_{w ∈ wrt} a_w²)`
    Growth { wrt: &'a [Var], k: f64 },
    /// `|e(a)| ≤ C`
    Bound { c: f64 },
    /// `(v − v')(g(.., v, ..) − g(.., v', ..)) ≤ −α |v − v'|²`
    OneSided { alpha: f64 },
    /// `ξ b(ξ, η) ≤ β (1 + ξ²)`
    XiDrift { beta: f64 },
}

struct Sampler<'a> {
    rng: ChaCha8Rng,
    bx: &'a SamplingBox,
    budget: usize,
}

impl Sampler<'_> {
    fn draw(&mut self, vars: &[Var]) -> Env {
        let mut env = Env::new();
        for &v in vars {
            let [lo, hi] = self.bx.range(v);
            env.set(v, self.rng.random_range(lo..=hi));
        }
        env
    }

    /// Partner point: uniform half the time, a small perturbation otherwise.
    fn partner(&mut self, base: &Env, vars: &[Var], moving: &[Var]) -> Env {
        let local = self.rng.random_bool(0.5);
        let mut env = *base;
        for &v in vars {
            if !moving.contains(&v) {
                continue;
            }
            let [lo, hi] = self.bx.range(v);
            let x = if local {
                let w = 1e-3 * (hi - lo);
                (base.get(v).unwrap() + self.rng.random_range(-w..=w)).clamp(lo, hi)
            } else {
                self.rng.random_range(lo..=hi)
            };
            env.set(v, x);
        }
        env
    }

    fn run(&mut self, expr: &Expr, vars: &[Var], kind: Kind<'_>) -> Verdict {
        for _ in 0..self.budget {
            let a = self.draw(vars);
            let outcome = match &kind {
                Kind::Lipschitz { wrt, k } => {
                    let b = self.partner(&a, vars, wrt);
                    let d2: f64 = wrt.iter().map(|w| (a.get(*w).unwrap() - b.get(*w).unwrap()).powi(2)).sum();
                    pair(expr, &a, &b, vars, |ea, eb| ((ea - eb).powi(2), k * d2))
                }
                Kind::Growth { wrt, k } => {
                    let s: f64 = wrt.iter().map(|w| a.get(*w).unwrap().powi(2)).sum();
                    single(expr, &a, vars, |e| (e * e, k * (1.0 + s)))
                }
                Kind::Bound { c } => single(expr, &a, vars, |e| (e.abs(), *c)),
                Kind::OneSided { alpha } => {
                    let b = self.partner(&a, vars, &[Var::V]);
                    let dv = a.get(Var::V).unwrap() - b.get(Var::V).unwrap();
                    pair(expr, &a, &b, vars, |ea, eb| (dv * (ea - eb), -alpha * dv * dv))
                }
                Kind::XiDrift { beta } => {
                    let xi = a.get(Var::Xi).unwrap();
                    single(expr, &a, vars, |e| (xi * e, beta * (1.0 + xi * xi)))
                }
            };
            if let Some(w) = outcome {
                return Verdict::Falsified(w);
            }
        }
        Verdict::Consistent
    }
}

fn point(env: &Env, vars: &[Var]) -> Vec<(Var, f64)> {
    vars.iter().map(|v| (*v, env.get(*v).unwrap())).collect()
}

fn violates(lhs: f64, rhs: f64) -> bool {
    lhs > rhs + REL_TOL * rhs.abs() + ABS_TOL
}

fn single(expr: &Expr, a: &Env, vars: &[Var], test: impl Fn(f64) -> (f64, f64)) -> Option<Witness> {
    match expr.eval(a) {
        Ok(e) => {
            let (lhs, rhs) = test(e);
            violates(lhs, rhs).then(|| Witness { point: point(a, vars), other: None, lhs, rhs, note: None })
        }
        Err(err) => Some(Witness {
            point: point(a, vars),
            other: None,
            lhs: f64::NAN,
            rhs: f64::NAN,
            note: Some(err.to_string()),
        }),
    }
}

fn pair(
    expr: &Expr,
    a: &Env,
    b: &Env,
    vars: &[Var],
    test: impl Fn(f64, f64) -> (f64, f64),
) -> Option<Witness> {
    match (expr.eval(a), expr.eval(b)) {
        (Ok(ea), Ok(eb)) => {
            let (lhs, rhs) = test(ea, eb);
            violates(lhs, rhs).then(|| Witness {
                point: point(a, vars),
                other: Some(point(b, vars)),
                lhs,
                rhs,
                note: None,
            })
        }
        (Err(err), _) | (_, Err(err)) => Some(Witness {
            point: point(a, vars),
            other: Some(point(b, vars)),
            lhs: f64::NAN,
            rhs: f64::NAN,
            note: Some(err.to_string()),
        }),
    }
}

/// Falsification check of the declared constants. Constants that are not
/// declared skip the checks that need them.
pub fn check_hypotheses(
    coeffs: &CoefficientSet,
    model: ModelKind,
    basis: &EigenBasis,
    sample_budget: usize,
    bx: &SamplingBox,
    seed: u64,
) -> HypothesisReport {
    use Var::*;
    let c = &coeffs.constants;
    let mut s = Sampler { rng: ChaCha8Rng::seed_from_u64(seed), bx, budget: sample_budget.max(1) };
    let mut checks = Vec::new();
    let mut add = |h: &'static str, desc: &str, expr: &Expr, vars: &[Var], kind: Option<Kind<'_>>| {
        if let Some(kind) = kind {
            checks.push(HypothesisCheck { hypothesis: h, description: desc.to_string(), verdict: s.run(expr, vars, kind) });
        }
    };

    let (f_vars, f_wrt): (&[Var], &[Var]) = match model {
        ModelKind::I => (&[U, Xi, X], &[U, Xi]),
        ModelKind::II => (&[U, V, Xi, X], &[U, V, Xi]),
    };
    add("H1", "f Lipschitz (K_f)", &coeffs.f, f_vars, c.k_f.map(|k| Kind::Lipschitz { wrt: f_wrt, k }));
    if model == ModelKind::II {
        add("H1", "f linear growth (K_f)", &coeffs.f, f_vars, c.k_f.map(|k| Kind::Growth { wrt: f_wrt, k }));
        add("H1", "f bounded (C_f)", &coeffs.f, f_vars, c.c_f.map(|c| Kind::Bound { c }));
        add("H1", "sigma1 Lipschitz (K_sigma1)", &coeffs.sigma1, &[U], c.k_sigma1.map(|k| Kind::Lipschitz { wrt: &[U], k }));
        add("H1", "sigma1 linear growth (K_sigma1)", &coeffs.sigma1, &[U], c.k_sigma1.map(|k| Kind::Growth { wrt: &[U], k }));

        let g_vars = &[U, V, Xi, X];
        add("H2", "g Lipschitz (K_g)", &coeffs.g, g_vars, c.k_g.map(|k| Kind::Lipschitz { wrt: &[U, V, Xi], k }));
        add("H2", "g linear growth (K_g)", &coeffs.g, g_vars, c.k_g.map(|k| Kind::Growth { wrt: &[U, V, Xi], k }));
        add("H2", "g one-sided dissipativity (alpha)", &coeffs.g, g_vars, c.alpha.map(|alpha| Kind::OneSided { alpha }));
        add("H2", "sigma2 Lipschitz (K_sigma2)", &coeffs.sigma2, &[U, V], c.k_sigma2.map(|k| Kind::Lipschitz { wrt: &[U, V], k }));
        add("H2", "sigma2 growth (K_sigma2)", &coeffs.sigma2, &[U, V], c.k_sigma2.map(|k| Kind::Growth { wrt: &[U], k }));
        add("H2", "sigma2 bounded (C_sigma2)", &coeffs.sigma2, &[U, V], c.c_sigma2.map(|c| Kind::Bound { c }));
    }

    let micro = &[Xi, Eta];
    add("H3", "b Lipschitz (K_b)", &coeffs.b, micro, c.k_b.map(|k| Kind::Lipschitz { wrt: micro, k }));
    add("H3", "b linear growth (K_b)", &coeffs.b, micro, c.k_b.map(|k| Kind::Growth { wrt: micro, k }));
    add("H3", "b bounded (C_b)", &coeffs.b, micro, c.c_b.map(|c| Kind::Bound { c }));
    add("H3", "xi*b <= beta(1+xi^2)", &coeffs.b, micro, c.beta.map(|beta| Kind::XiDrift { beta }));
    add("H3", "sigma3 Lipschitz (K_sigma3)", &coeffs.sigma3, &[Xi], c.k_sigma3.map(|k| Kind::Lipschitz { wrt: &[Xi], k }));
    add("H3", "sigma3 linear growth (K_sigma3)", &coeffs.sigma3, &[Xi], c.k_sigma3.map(|k| Kind::Growth { wrt: &[Xi], k }));
    add("H3", "sigma3 bounded (C_sigma3)", &coeffs.sigma3, &[Xi], c.c_sigma3.map(|c| Kind::Bound { c }));

    add("H4", "B Lipschitz (K_B)", &coeffs.big_b, micro, c.k_big_b.map(|k| Kind::Lipschitz { wrt: micro, k }));
    add("H4", "B linear growth (K_B)", &coeffs.big_b, micro, c.k_big_b.map(|k| Kind::Growth { wrt: micro, k }));
    add("H4", "B bounded (C_B)", &coeffs.big_b, micro, c.c_big_b.map(|c| Kind::Bound { c }));
    add("H4", "sigma4 Lipschitz (K_sigma4)", &coeffs.sigma4, micro, c.k_sigma4.map(|k| Kind::Lipschitz { wrt: micro, k }));
    add("H4", "sigma4 linear growth (K_sigma4)", &coeffs.sigma4, micro, c.k_sigma4.map(|k| Kind::Growth { wrt: micro, k }));
    add("H4", "sigma4 bounded (C_sigma4)", &coeffs.sigma4, micro, c.c_sigma4.map(|c| Kind::Bound { c }));

    let h5_margin = match model {
        ModelKind::I => None,
        ModelKind::II => c.kappa(basis.lambda1()),
    };
    HypothesisReport { checks, h5_margin }
}
