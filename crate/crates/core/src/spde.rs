//! Macroscopic fields: exponential Euler–Maruyama steppers in mild form for
//! the slow field `u` and the fast field `v`, the frozen fast equation, the
//! averaged field `f̄`, and trajectory diagnostics (contraction rate, energy
//! identity residual, temporal Hölder exponent).
//!
//! Every stepper integrates the linear part exactly per mode and holds the
//! Nemytskii drift constant over the step:
//! `u' = G_h u + φ₁(h) F(u) + G_h Σ(u) ΔW` with `φ₁(h) = (1 − e^{−λh}) / λ`.
//! A constant linear coefficient of `g` in `v` is moved into the exactly
//! integrated part of the fast equation.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsl::{CoefficientSet, Expr};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, eval_on_grid, mix64, step_count, Channel, EigenBasis, Field, GridArgs, NoiseStream, StepFactors};
use crate::sde::{ErgodicParams, FastScale};
use crate::stats::{mean_stderr, ols, student_t_quantile};

pub use crate::stats::{moment_sup, SupStat};

#[derive(Clone, Debug, PartialEq)]
pub struct MacroState {
    pub u: Field,
    /// Absent for the single-field model.
    pub v: Option<Field>,
    pub t: f64,
}

pub(crate) fn grid_field(basis: &EigenBasis, e: &Expr, args: &GridArgs<'_>) -> Result<Option<Field>> {
    if e.is_zero_constant() {
        return Ok(None);
    }
    Ok(Some(basis.project(&eval_on_grid(basis, e, args)?)?))
}

fn check_finite(f: &Field, component: &'static str, t: f64) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::BlowUp { component, t })
    }
}

/// Exponential Euler step `G base + φ₁ drift + G Σ dw`, with absent drift or
/// diffusion read as zero.
pub(crate) fn exp_euler(
    factors: &StepFactors,
    base: &Field,
    drift: Option<&Field>,
    diffusion: Option<&Field>,
    dw: f64,
) -> Field {
    let mut out = base.clone();
    let c = out.coeffs_mut();
    for k in 0..c.len() {
        let mut x = c[k];
        if let Some(s) = diffusion {
            x += s.coeffs()[k] * dw;
        }
        x *= factors.decay[k];
        if let Some(d) = drift {
            x += factors.phi1[k] * d.coeffs()[k];
        }
        c[k] = x;
    }
    out
}

/// Slow update of `u` from grid values of its drift arguments.
/// `drift_u` feeds `f`, `noise_u` feeds `σ1`; they differ only for the
/// auxiliary process, which freezes `u` in the drift alone.
#[allow(clippy::too_many_arguments)]
pub(crate) fn slow_update(
    basis: &EigenBasis,
    factors: &StepFactors,
    coeffs: &CoefficientSet,
    u: &Field,
    drift_u: &[f64],
    v: Option<&[f64]>,
    noise_u: &[f64],
    xi: f64,
    dw1: f64,
) -> Result<Field> {
    let f = grid_field(basis, &coeffs.f, &GridArgs { u: Some(drift_u), v, xi: Some(xi), eta: None })?;
    let s = grid_field(basis, &coeffs.sigma1, &GridArgs { u: Some(noise_u), ..Default::default() })?;
    Ok(exp_euler(factors, u, f.as_ref(), s.as_ref(), dw1))
}

/// Exactly integrated part of the fast equation: `Δ + g₁` when `g` has a
/// constant linear coefficient `g₁` in `v`, plain `Δ` otherwise.
#[derive(Clone, Debug)]
pub(crate) struct FastOp {
    pub g1: f64,
    pub factors: StepFactors,
}

impl FastOp {
    /// Factors over fast time `tau`.
    pub fn new(basis: &EigenBasis, coeffs: &CoefficientSet, tau: f64) -> Self {
        let g1 = g_linear_slope(coeffs).unwrap_or(0.0);
        FastOp { g1, factors: basis.shifted_step_factors(tau, g1) }
    }
}

/// Fast update of `v` over the fast time of `op`, with the noise increment
/// already scaled (`dw2 / √ε`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn fast_update(
    basis: &EigenBasis,
    op: &FastOp,
    coeffs: &CoefficientSet,
    v: &Field,
    ug: &[f64],
    vg: &[f64],
    xi: f64,
    scaled_dw2: f64,
) -> Result<Field> {
    let args = GridArgs { u: Some(ug), v: Some(vg), xi: Some(xi), eta: None };
    let g = if coeffs.g.is_zero_constant() {
        None
    } else {
        let mut gg = eval_on_grid(basis, &coeffs.g, &args)?;
        if op.g1 != 0.0 {
            for (a, b) in gg.iter_mut().zip(vg) {
                *a -= op.g1 * b;
            }
        }
        Some(basis.project(&gg)?)
    };
    let s = grid_field(basis, &coeffs.sigma2, &GridArgs { xi: None, ..args })?;
    Ok(exp_euler(&op.factors, v, g.as_ref(), s.as_ref(), scaled_dw2))
}

/// One mild-form step of `du = [Δu + f(u, v, ξ)] dt + σ1(u) dW¹`.
pub fn step_slow_spde(
    basis: &EigenBasis,
    state: &MacroState,
    xi: f64,
    coeffs: &CoefficientSet,
    h: f64,
    dw1: f64,
) -> Result<MacroState> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let ug = basis.synthesize(&state.u)?;
    let vg = state.v.as_ref().map(|v| basis.synthesize(v)).transpose()?;
    let factors = basis.step_factors(h);
    let u = slow_update(basis, &factors, coeffs, &state.u, &ug, vg.as_deref(), &ug, xi, dw1)?;
    let t = state.t + h;
    check_finite(&u, "slow field", t)?;
    Ok(MacroState { u, v: state.v.clone(), t })
}

/// One mild-form step of `dv = ε⁻¹[Δv + g(u, v, ξ)] dt + ε^{-1/2} σ2(u, v) dW²`.
pub fn step_fast_spde(
    basis: &EigenBasis,
    state: &MacroState,
    xi: f64,
    coeffs: &CoefficientSet,
    scale: &FastScale,
    h: f64,
    dw2: f64,
) -> Result<MacroState> {
    scale.check_step(h)?;
    let v = state.v.as_ref().ok_or_else(|| Error::InvalidArgument("state has no fast field".into()))?;
    let ug = basis.synthesize(&state.u)?;
    let vg = basis.synthesize(v)?;
    let eps = scale.eps();
    let op = FastOp::new(basis, coeffs, h / eps);
    let v = fast_update(basis, &op, coeffs, v, &ug, &vg, xi, dw2 / eps.sqrt())?;
    let t = state.t + h;
    check_finite(&v, "fast field", t)?;
    Ok(MacroState { u: state.u.clone(), v: Some(v), t })
}

/// Path of the frozen fast equation `dv = [Δv + g(u0, v, ξ)] dt + σ2(u0, v) dW²`
/// on `0, h, .., T` (length `T / h + 1`).
#[allow(clippy::too_many_arguments)]
pub fn simulate_frozen_fast_spde(
    basis: &EigenBasis,
    u0: &Field,
    xi: f64,
    v0: &Field,
    coeffs: &CoefficientSet,
    t_final: f64,
    h: f64,
    stream: &NoiseStream,
) -> Result<Vec<Field>> {
    let mut path = Vec::with_capacity(step_count(t_final, h)? + 1);
    frozen_fast_run(basis, u0, xi, v0, coeffs, t_final, h, stream, |v, _| {
        path.push(v.clone());
        Ok(())
    })?;
    Ok(path)
}

/// Drives the frozen fast equation, calling `visit(v, vg)` at every grid
/// time including `t = 0` (`vg` are the grid values of `v`).
#[allow(clippy::too_many_arguments)]
fn frozen_fast_run(
    basis: &EigenBasis,
    u0: &Field,
    xi: f64,
    v0: &Field,
    coeffs: &CoefficientSet,
    t_final: f64,
    h: f64,
    stream: &NoiseStream,
    mut visit: impl FnMut(&Field, &[f64]) -> Result<()>,
) -> Result<()> {
    basis.check(v0)?;
    let n = step_count(t_final, h)?;
    let factor = stream.factor_for(h)?;
    let ug = basis.synthesize(u0)?;
    let op = FastOp::new(basis, coeffs, h);
    let mut cursor = stream.cursor(0);
    let mut v = v0.clone();
    let mut vg = basis.synthesize(&v)?;
    visit(&v, &vg)?;
    for i in 0..n {
        let dw = cursor.next_coarse(factor);
        v = fast_update(basis, &op, coeffs, &v, &ug, &vg, xi, dw)?;
        check_finite(&v, "frozen fast field", (i + 1) as f64 * h)?;
        vg = basis.synthesize(&v)?;
        visit(&v, &vg)?;
    }
    Ok(())
}

/// Ensemble mean field with per-mode standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEstimate {
    pub mean: Field,
    pub stderr: Vec<f64>,
}

impl FieldEstimate {
    /// `sqrt(Σ_k stderr_k²)`, the standard error of the estimate in norm.
    pub fn stderr_norm(&self) -> f64 {
        self.stderr.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Estimate `f̄(u, ξ) = ∫ f(u, v, ξ) μ^{u,ξ}(dv)` by a time-and-ensemble
/// average of the Nemytskii field along frozen fast paths started at `v0`.
pub fn estimate_fbar(
    basis: &EigenBasis,
    u: &Field,
    xi: f64,
    v0: &Field,
    coeffs: &CoefficientSet,
    params: &ErgodicParams,
    seed: u64,
) -> Result<FieldEstimate> {
    params.validate()?;
    let first = params.first_averaged_step();
    let n = step_count(params.t_avg, params.step)?;
    let ug = basis.synthesize(u)?;
    let master = derive_seed(seed, "fbar");
    let per_replica: Vec<Field> = (0..params.replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<Field> {
            let stream = NoiseStream::new(master, Channel::W2, r, params.step)?;
            let mut acc = vec![0.0; basis.grid_points()];
            let mut i = 0usize;
            frozen_fast_run(basis, u, xi, v0, coeffs, params.t_avg, params.step, &stream, |_, vg| {
                if i >= first && i < n {
                    let fg = eval_on_grid(
                        basis,
                        &coeffs.f,
                        &GridArgs { u: Some(&ug), v: Some(vg), xi: Some(xi), eta: None },
                    )?;
                    for (a, x) in acc.iter_mut().zip(fg) {
                        *a += x;
                    }
                }
                i += 1;
                Ok(())
            })?;
            let count = (n - first) as f64;
            for a in &mut acc {
                *a /= count;
            }
            basis.project(&acc)
        })
        .collect::<Result<_>>()?;
    Ok(field_mean(&per_replica))
}

pub(crate) fn field_mean(fields: &[Field]) -> FieldEstimate {
    let n_modes = fields[0].n_modes();
    let mut mean = Vec::with_capacity(n_modes);
    let mut stderr = Vec::with_capacity(n_modes);
    for k in 0..n_modes {
        let col: Vec<f64> = fields.iter().map(|f| f.coeffs()[k]).collect();
        let (m, s) = mean_stderr(&col);
        mean.push(m);
        stderr.push(s);
    }
    FieldEstimate { mean: Field::from_coeffs(mean), stderr }
}

/// `g = g₀(u, ξ, x) + g₁ v` with constant `g₁`, and `f` affine in `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearStructure {
    pub g1: f64,
}

const AFFINE_TOL: f64 = 1e-9;

fn affine_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= AFFINE_TOL * (1.0 + a.abs().max(b.abs()))
}

/// Fixed pseudo-random sample points `(u, ξ, x)` for the affinity checks.
fn affinity_samples() -> impl Iterator<Item = (f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11_4e_a4);
    (0..64).map(move |_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..1.0)))
}

/// `g₁` when `g(u, v, ξ) = g₀(u, ξ, x) + g₁ v` with constant `g₁`.
pub fn g_linear_slope(coeffs: &CoefficientSet) -> Option<f64> {
    let mut g1: Option<f64> = None;
    for (u, xi, x) in affinity_samples() {
        let at = |v: f64| coeffs.g.eval_raw(&[u, v, xi, 0.0, x]).ok();
        let g0 = at(0.0)?;
        let slope = at(1.0)? - g0;
        match g1 {
            None => g1 = Some(slope),
            Some(s) if !affine_close(s, slope) => return None,
            _ => {}
        }
        for v in [-2.5, 0.5, 3.0] {
            if !affine_close(at(v)?, g0 + slope * v) {
                return None;
            }
        }
    }
    g1
}

fn f_affine_in_v(coeffs: &CoefficientSet) -> bool {
    affinity_samples().all(|(u, xi, x)| {
        let at = |v: f64| coeffs.f.eval_raw(&[u, v, xi, 0.0, x]).ok();
        let (Some(f0), Some(f1)) = (at(0.0), at(1.0)) else { return false };
        [-2.5, 0.5, 3.0].iter().all(|v| at(*v).is_some_and(|fv| affine_close(fv, f0 + (f1 - f0) * v)))
    })
}

/// Detects coefficients for which the invariant mean of the frozen fast
/// equation solves a linear elliptic problem, by affinity checks on a fixed
/// set of sample points.
pub fn detect_linear_structure(coeffs: &CoefficientSet) -> Option<LinearStructure> {
    let g1 = g_linear_slope(coeffs)?;
    f_affine_in_v(coeffs).then_some(LinearStructure { g1 })
}

/// Invariant mean of the frozen fast equation for linear structure:
/// `m_k = P[g₀(u, ξ)]_k / (λ_k − g₁)`.
pub fn linear_elliptic_mean(
    basis: &EigenBasis,
    lin: &LinearStructure,
    coeffs: &CoefficientSet,
    ug: &[f64],
    xi: f64,
) -> Result<Field> {
    if lin.g1 >= basis.lambda1() {
        return Err(Error::InvalidArgument(format!(
            "g is not dissipative enough for a stationary mean: slope {} >= lambda1",
            lin.g1
        )));
    }
    let zeros = vec![0.0; ug.len()];
    let g0 = eval_on_grid(basis, &coeffs.g, &GridArgs { u: Some(ug), v: Some(&zeros), xi: Some(xi), eta: None })?;
    let mut m = basis.project(&g0)?;
    for (c, l) in m.coeffs_mut().iter_mut().zip(basis.eigenvalues()) {
        *c /= l - lin.g1;
    }
    Ok(m)
}

type CacheKey = (Vec<i64>, i64);

/// Evaluation rule for the averaged drift `f̄(u, ξ)`.
pub enum AveragedField {
    /// Expression in `u`, `xi`, `x` applied pointwise.
    ClosedForm(Expr),
    /// Exact average for coefficients with [`LinearStructure`].
    LinearElliptic { lin: LinearStructure, coeffs: CoefficientSet },
    /// Ergodic estimation, memoized on `(u, ξ)` rounded to `1e-6`.
    Ergodic(ErgodicField),
}

pub struct ErgodicField {
    pub coeffs: CoefficientSet,
    pub params: ErgodicParams,
    pub v0: Field,
    pub seed: u64,
    cache: Mutex<HashMap<CacheKey, FieldEstimate>>,
}

const CACHE_QUANTUM: f64 = 1e-6;

impl ErgodicField {
    pub fn new(coeffs: CoefficientSet, params: ErgodicParams, v0: Field, seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(ErgodicField { coeffs, params, v0, seed, cache: Mutex::new(HashMap::new()) })
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    /// Estimate at `(u, ξ)` rounded to the cache quantum. The seed is a
    /// function of the rounded key, so the value does not depend on which
    /// caller fills the cache first.
    pub fn estimate(&self, basis: &EigenBasis, u: &Field, xi: f64) -> Result<FieldEstimate> {
        let q = |c: f64| (c / CACHE_QUANTUM).round() as i64;
        let key: CacheKey = (u.coeffs().iter().map(|c| q(*c)).collect(), q(xi));
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let uq = Field::from_coeffs(key.0.iter().map(|k| *k as f64 * CACHE_QUANTUM).collect());
        let xq = key.1 as f64 * CACHE_QUANTUM;
        let seed = key.0.iter().fold(mix64(self.seed ^ key.1 as u64), |h, k| mix64(h ^ *k as u64));
        let est = estimate_fbar(basis, &uq, xq, &self.v0, &self.coeffs, &self.params, seed)?;
        self.cache.lock().unwrap().insert(key, est.clone());
        Ok(est)
    }
}

impl AveragedField {
    /// The exact linear-elliptic mode, or an error when the coefficients lack
    /// linear structure.
    pub fn linear_elliptic(coeffs: &CoefficientSet) -> Result<Self> {
        let lin = detect_linear_structure(coeffs).ok_or_else(|| {
            Error::Config("linear_elliptic f̄ needs g affine in v with constant slope and f affine in v".into())
        })?;
        Ok(AveragedField::LinearElliptic { lin, coeffs: coeffs.clone() })
    }

    /// Whether values change only when `(u, ξ)` change by more than rounding
    /// (used to refresh expensive estimates only at macro steps).
    pub fn is_expensive(&self) -> bool {
        matches!(self, AveragedField::Ergodic(_))
    }

    pub fn eval(&self, basis: &EigenBasis, u: &Field, xi: f64) -> Result<Field> {
        match self {
            AveragedField::ClosedForm(e) => {
                let ug = basis.synthesize(u)?;
                Ok(grid_field(basis, e, &GridArgs { u: Some(&ug), xi: Some(xi), ..Default::default() })?
                    .unwrap_or_else(|| basis.zeros()))
            }
            AveragedField::LinearElliptic { lin, coeffs } => {
                let ug = basis.synthesize(u)?;
                let m = linear_elliptic_mean(basis, lin, coeffs, &ug, xi)?;
                let mg = basis.synthesize(&m)?;
                Ok(grid_field(basis, &coeffs.f, &GridArgs { u: Some(&ug), v: Some(&mg), xi: Some(xi), eta: None })?
                    .unwrap_or_else(|| basis.zeros()))
            }
            AveragedField::Ergodic(e) => Ok(e.estimate(basis, u, xi)?.mean),
        }
    }
}

/// Fitted exponential decay of `E‖v − v'‖²` for two frozen fast paths sharing
/// their noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionFit {
    pub kappa_hat: f64,
    /// `2λ₁ + 2α − K_σ2` from the declared constants, if declared.
    pub kappa_theory: Option<f64>,
    pub times: Vec<f64>,
    pub mean_gap_sq: Vec<f64>,
}

/// Least-squares slope of `log E‖v(t) − v'(t)‖²` against `t ∈ [0, T]`, the
/// two paths started at `v0`, `v0p` and driven by identical increments.
#[allow(clippy::too_many_arguments)]
pub fn measure_contraction(
    basis: &EigenBasis,
    u0: &Field,
    v0: &Field,
    v0p: &Field,
    xi: f64,
    coeffs: &CoefficientSet,
    t_final: f64,
    h: f64,
    replicas: usize,
    seed: u64,
) -> Result<ContractionFit> {
    if replicas == 0 {
        return Err(Error::InvalidArgument("need at least one replica".into()));
    }
    if v0.distance_sq(v0p)? == 0.0 {
        return Err(Error::DegenerateFit("initial fields coincide; the gap is identically zero".into()));
    }
    let n = step_count(t_final, h)?;
    let master = derive_seed(seed, "contraction");
    let gaps: Vec<Vec<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let stream = NoiseStream::new(master, Channel::W2, r, h)?;
            let a = simulate_frozen_fast_spde(basis, u0, xi, v0, coeffs, t_final, h, &stream)?;
            let b = simulate_frozen_fast_spde(basis, u0, xi, v0p, coeffs, t_final, h, &stream)?;
            a.iter().zip(&b).map(|(x, y)| x.distance_sq(y)).collect()
        })
        .collect::<Result<_>>()?;
    let mean_gap_sq: Vec<f64> =
        (0..=n).map(|i| gaps.iter().map(|g| g[i]).sum::<f64>() / replicas as f64).collect();
    if let Some(i) = mean_gap_sq.iter().position(|g| !(*g > f64::MIN_POSITIVE && g.is_finite())) {
        return Err(Error::DegenerateFit(format!("gap reached numerical zero at t = {}", i as f64 * h)));
    }
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let logs: Vec<f64> = mean_gap_sq.iter().map(|g| g.ln()).collect();
    let fit = ols(&times, &logs)?;
    Ok(ContractionFit {
        kappa_hat: -fit.slope,
        kappa_theory: coeffs.constants.kappa(basis.lambda1()),
        times,
        mean_gap_sq,
    })
}

/// Slow-field path with its driving increments, recorded at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowTrajectory {
    pub h: f64,
    pub xi: f64,
    pub u: Vec<Field>,
    pub dw1: Vec<f64>,
}

/// Slow field alone (`f` and `σ1` must not reference `v`), particle frozen at
/// `xi`, noise from channel `W¹` of `stream` when given.
pub fn simulate_slow_spde(
    basis: &EigenBasis,
    u0: &Field,
    xi: f64,
    coeffs: &CoefficientSet,
    t_final: f64,
    h: f64,
    stream: Option<&NoiseStream>,
) -> Result<SlowTrajectory> {
    if coeffs.f.depends_on(crate::dsl::Var::V) {
        return Err(Error::InvalidArgument("slow-only simulation needs f independent of v".into()));
    }
    let n = step_count(t_final, h)?;
    let factor = stream.map(|s| s.factor_for(h)).transpose()?;
    let mut cursor = stream.map(|s| s.cursor(0));
    let factors = basis.step_factors(h);
    let mut u = u0.clone();
    basis.check(&u)?;
    let mut path = Vec::with_capacity(n + 1);
    let mut dws = Vec::with_capacity(n);
    path.push(u.clone());
    for i in 0..n {
        let dw = match (&mut cursor, factor) {
            (Some(c), Some(f)) => c.next_coarse(f),
            _ => 0.0,
        };
        let ug = basis.synthesize(&u)?;
        u = slow_update(basis, &factors, coeffs, &u, &ug, None, &ug, xi, dw)?;
        check_finite(&u, "slow field", (i + 1) as f64 * h)?;
        path.push(u.clone());
        dws.push(dw);
    }
    Ok(SlowTrajectory { h, xi, u: path, dw1: dws })
}

/// Terms of the energy identity
/// `‖u(t)‖² = ‖u₀‖² − 2∫‖∇u‖² + 2∫(f, u) + ∫‖σ1(u)‖² + 2∫(σ1(u), u) dW¹`,
/// accumulated along a recorded trajectory.
///
/// Over a step the dissipation is integrated exactly for the frozen
/// semigroup, `Σ_k u_k² (1 − e^{−2λ_k h})`; the other integrals use the left
/// endpoint and the recorded increments.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyLedger {
    pub times: Vec<f64>,
    pub norm_sq: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub drift: Vec<f64>,
    pub ito: Vec<f64>,
    pub martingale: Vec<f64>,
    /// `‖u‖² − ‖u₀‖² + dissipation − drift − ito − martingale`.
    pub residual: Vec<f64>,
}

impl EnergyLedger {
    pub fn max_abs_residual(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

pub fn energy_residual(basis: &EigenBasis, traj: &SlowTrajectory, coeffs: &CoefficientSet) -> Result<EnergyLedger> {
    let n = traj.dw1.len();
    if traj.u.len() != n + 1 {
        return Err(Error::MissingNoise("W1"));
    }
    let h = traj.h;
    let damp: Vec<f64> = basis.eigenvalues().iter().map(|l| -(-2.0 * l * h).exp_m1()).collect();
    let mut led = EnergyLedger {
        times: Vec::with_capacity(n + 1),
        norm_sq: Vec::with_capacity(n + 1),
        dissipation: Vec::with_capacity(n + 1),
        drift: Vec::with_capacity(n + 1),
        ito: Vec::with_capacity(n + 1),
        martingale: Vec::with_capacity(n + 1),
        residual: Vec::with_capacity(n + 1),
    };
    let (mut d, mut dr, mut it, mut mg) = (0.0, 0.0, 0.0, 0.0);
    let n0 = traj.u[0].norm_sq();
    for i in 0..=n {
        let u = &traj.u[i];
        let ns = u.norm_sq();
        led.times.push(i as f64 * h);
        led.norm_sq.push(ns);
        led.dissipation.push(d);
        led.drift.push(dr);
        led.ito.push(it);
        led.martingale.push(mg);
        led.residual.push(ns - n0 + d - dr - it - mg);
        if i == n {
            break;
        }
        let ug = basis.synthesize(u)?;
        let args = GridArgs { u: Some(&ug), xi: Some(traj.xi), ..Default::default() };
        d += u.coeffs().iter().zip(&damp).map(|(c, w)| c * c * w).sum::<f64>();
        if let Some(f) = grid_field(basis, &coeffs.f, &args)? {
            dr += 2.0 * h * crate::numerics::l2_inner(&f, u)?;
        }
        if let Some(s) = grid_field(basis, &coeffs.sigma1, &args)? {
            it += s.norm_sq() * h;
            mg += 2.0 * crate::numerics::l2_inner(&s, u)? * traj.dw1[i];
        }
    }
    Ok(led)
}

/// Fitted temporal regularity exponent `γ̂` of `E‖u(t₀ + h) − u(t₀)‖² ≈ C h^γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct HolderFit {
    pub gamma: f64,
    /// Delete-one jackknife standard error over replicas.
    pub stderr: f64,
    /// 95% interval `γ̂ ± t_{0.975, R−1} · stderr`.
    pub ci: (f64, f64),
    pub lags: Vec<f64>,
    pub mean_sq_increment: Vec<f64>,
    pub replicas: usize,
    /// Fewer than 30 replicas: the interval is unreliable.
    pub small_ensemble: bool,
}

/// Log-log regression of mean squared increments at lags `lags` (durations,
/// multiples of the trajectory step `dt`) from time `t0`.
pub fn holder_modulus(ensemble: &[Vec<Field>], dt: f64, t0: f64, lags: &[f64]) -> Result<HolderFit> {
    if lags.len() < 3 {
        return Err(Error::InvalidArgument("need at least three lags".into()));
    }
    if let Some(l) = lags.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::InvalidArgument(format!("lags must lie in (0, 1), got {l}")));
    }
    let r = ensemble.len();
    if r < 3 {
        return Err(Error::DegenerateFit(format!("ensemble of {r} replicas is too small")));
    }
    let i0 = if t0 == 0.0 { 0 } else { crate::numerics::step_ratio(t0, dt)? };
    let offsets: Vec<usize> = lags.iter().map(|l| crate::numerics::step_ratio(*l, dt)).collect::<Result<_>>()?;
    let len = ensemble[0].len();
    if ensemble.iter().any(|p| p.len() != len) || i0 + offsets.iter().max().unwrap() >= len {
        return Err(Error::InvalidArgument("trajectories do not cover t0 + max lag".into()));
    }
    let x: Vec<f64> = lags.iter().map(|l| l.ln()).collect();
    // per-replica squared increments, [lag][replica]
    let incr: Vec<Vec<f64>> = offsets
        .iter()
        .map(|&o| ensemble.iter().map(|p| p[i0 + o].distance_sq(&p[i0])).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let sums: Vec<f64> = incr.iter().map(|c| c.iter().sum()).collect();
    let means: Vec<f64> = sums.iter().map(|s| s / r as f64).collect();
    if means.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::DegenerateFit("zero mean increment at some lag".into()));
    }
    let fit_logs = |m: &[f64]| -> Result<f64> {
        let y: Vec<f64> = m.iter().map(|v| v.ln()).collect();
        Ok(ols(&x, &y)?.slope)
    };
    let gamma = fit_logs(&means)?;
    let loo: Vec<f64> = (0..r)
        .map(|j| {
            let m: Vec<f64> = incr.iter().zip(&sums).map(|(c, s)| (s - c[j]) / (r - 1) as f64).collect();
            fit_logs(&m)
        })
        .collect::<Result<_>>()?;
    let loo_mean = loo.iter().sum::<f64>() / r as f64;
    let var = (r - 1) as f64 / r as f64 * loo.iter().map(|g| (g - loo_mean).powi(2)).sum::<f64>();
    let stderr = var.sqrt();
    let t = student_t_quantile(0.95, (r - 1) as f64);
    Ok(HolderFit {
        gamma,
        stderr,
        ci: (gamma - t * stderr, gamma + t * stderr),
        lags: lags.to_vec(),
        mean_sq_increment: means,
        replicas: r,
        small_ensemble: r < 30,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{CoefficientSpec, Constants};
    use std::f64::consts::PI;

    fn basis() -> EigenBasis {
        EigenBasis::new(16, 33).unwrap()
    }

    fn coeffs(f: &str, g: &str, s1: &str, s2: &str) -> CoefficientSet {
        CoefficientSet::from_exprs(&CoefficientSpec {
            f: f.into(),
            g: g.into(),
            sigma1: s1.into(),
            sigma2: s2.into(),
            ..Default::default()
        })
        .unwrap()
    }

    fn close(a: &Field, b: &Field, tol: f64) {
        for (k, (x, y)) in a.coeffs().iter().zip(b.coeffs()).enumerate() {
            assert!((x - y).abs() <= tol, "mode {}: {x} vs {y}", k + 1);
        }
    }

    #[test]
    fn slow_step_is_pure_semigroup_without_forcing() {
        let b = basis();
        let st = MacroState { u: Field::mode(16, 1), v: None, t: 0.0 };
        let out = step_slow_spde(&b, &st, 0.0, &coeffs("0", "0", "0", "0"), 0.05, 0.3).unwrap();
        assert!((out.u.coeffs()[0] - (-PI * PI * 0.05).exp()).abs() < 1e-15);
        assert_eq!(out.t, 0.05);
    }

    #[test]
    fn slow_step_constant_forcing_and_noise() {
        let b = basis();
        let h = 0.01;
        let one = b.project_fn(|_| 1.0);
        let zero = MacroState { u: b.zeros(), v: None, t: 0.0 };
        let out = step_slow_spde(&b, &zero, 0.0, &coeffs("1", "0", "0", "0"), h, 0.0).unwrap();
        let fac = b.step_factors(h);
        let expect = Field::from_coeffs(one.coeffs().iter().zip(&fac.phi1).map(|(c, p)| c * p).collect());
        close(&out.u, &expect, 1e-15);
        // independent oracle for the projection of 1: (√2/(M+1)) cot(kπ/(2(M+1))) for odd k
        let m1 = 34.0;
        let p1 = 2f64.sqrt() / m1 / (PI / (2.0 * m1)).tan();
        assert!((out.u.coeffs()[0] - p1 * (1.0 - (-PI * PI * h).exp()) / (PI * PI)).abs() < 1e-14);

        let dw = -0.07;
        let out = step_slow_spde(&b, &zero, 0.0, &coeffs("0", "0", "1", "0"), h, dw).unwrap();
        let expect = Field::from_coeffs(one.coeffs().iter().zip(&fac.decay).map(|(c, d)| c * d * dw).collect());
        close(&out.u, &expect, 1e-15);
    }

    #[test]
    fn fast_step_examples() {
        let b = basis();
        let scale = FastScale::new(0.01, 0.1).unwrap();
        let st = MacroState { u: b.zeros(), v: Some(Field::mode(16, 1)), t: 0.0 };
        let out = step_fast_spde(&b, &st, 0.0, &coeffs("0", "0", "0", "0"), &scale, 0.001, 0.0).unwrap();
        assert!((out.v.as_ref().unwrap().coeffs()[0] - (-PI * PI * 0.1f64).exp()).abs() < 1e-15);
        assert!((out.v.unwrap().coeffs()[0] - 0.3727).abs() < 1e-4);

        // g = -v: the linear part is exact, decay λ₁ + 1 per unit fast time
        let out = step_fast_spde(&b, &st, 0.0, &coeffs("0", "-v", "0", "0"), &scale, 0.001, 0.0).unwrap();
        let v1 = out.v.unwrap().coeffs()[0];
        assert!((v1 - (-(PI * PI + 1.0) * 0.1f64).exp()).abs() < 1e-15);

        assert!(step_fast_spde(&b, &st, 0.0, &coeffs("0", "0", "0", "0"), &scale, 0.002, 0.0).is_err());
    }

    #[test]
    fn fast_step_noise_matches_ito_isometry() {
        let b = basis();
        let (eps, h, c) = (0.05, 0.004, 0.7);
        let scale = FastScale::new(eps, 0.1).unwrap();
        let co = coeffs("0", "0", "0", "0.7");
        let stream = NoiseStream::new(4, Channel::W2, 0, h).unwrap();
        let st = MacroState { u: b.zeros(), v: Some(b.zeros()), t: 0.0 };
        let n = 20000;
        let mut acc = 0.0;
        for i in 0..n {
            let out = step_fast_spde(&b, &st, 0.0, &co, &scale, h, stream.increment(i)).unwrap();
            acc += out.v.unwrap().norm_sq();
        }
        let one = b.project_fn(|_| 1.0);
        let expect: f64 = one
            .coeffs()
            .iter()
            .zip(b.eigenvalues())
            .map(|(p, l)| c * c * h / eps * p * p * (-2.0 * l * h / eps).exp())
            .sum();
        // E‖v'‖² with ‖v'‖² a weighted chi-square: relative sd ≈ √2 / √n
        assert!((acc / n as f64 / expect - 1.0).abs() < 4.0 * 2f64.sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn mode_exactness_for_any_step() {
        let b = basis();
        let co = coeffs("0", "0", "0", "0");
        let v0 = Field::from_coeffs((1..=16).map(|k| 1.0 / k as f64).collect());
        let stream = NoiseStream::new(1, Channel::W2, 0, 0.25).unwrap();
        let path = simulate_frozen_fast_spde(&b, &b.zeros(), 0.0, &v0, &co, 1.0, 0.25, &stream).unwrap();
        let exact = b.semigroup(&v0, 1.0).unwrap();
        for (x, y) in path[4].coeffs().iter().zip(exact.coeffs()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn frozen_fast_examples() {
        let b = basis();
        let stream = NoiseStream::new(1, Channel::W2, 0, 0.01).unwrap();
        let e1 = Field::mode(16, 1);
        let path = simulate_frozen_fast_spde(&b, &b.zeros(), 0.0, &e1, &coeffs("0", "-v", "0", "0"), 0.5, 0.01, &stream).unwrap();
        // exact per mode: ETD1 of a linear equation
        assert!((path[50].coeffs()[0] - (-(PI * PI + 1.0) * 0.5f64).exp()).abs() < 1e-14);

        let path = simulate_frozen_fast_spde(&b, &b.zeros(), 0.0, &b.zeros(), &coeffs("0", "0", "0", "0"), 0.5, 0.01, &stream).unwrap();
        assert!(path.iter().all(|v| v.norm_sq() == 0.0));

        let path = simulate_frozen_fast_spde(&b, &b.zeros(), 0.0, &b.zeros(), &coeffs("0", "-v+1", "0", "0"), 5.0, 0.01, &stream).unwrap();
        let one = b.project_fn(|_| 1.0);
        for (k, (c, l)) in path.last().unwrap().coeffs().iter().zip(b.eigenvalues()).enumerate() {
            assert!((c - one.coeffs()[k] / (l + 1.0)).abs() < 1e-12, "mode {}", k + 1);
        }
    }

    #[test]
    fn fbar_of_v_free_f_is_exact() {
        let b = basis();
        let co = coeffs("tanh(u) + xi", "-v", "0", "1");
        let u = b.project_fn(|x| (PI * x).sin());
        let p = ErgodicParams { t_avg: 1.0, burn_in: 0.2, replicas: 3, step: 0.01 };
        let est = estimate_fbar(&b, &u, 0.5, &b.zeros(), &co, &p, 2).unwrap();
        let ug = b.synthesize(&u).unwrap();
        let exact = b.project(&ug.iter().map(|x| x.tanh() + 0.5).collect::<Vec<_>>()).unwrap();
        close(&est.mean, &exact, 1e-12);
        assert!(est.stderr_norm() < 1e-12);
    }

    #[test]
    fn fbar_linear_mean_zero() {
        let b = basis();
        let co = coeffs("v", "-v", "0", "1");
        let p = ErgodicParams { t_avg: 20.0, burn_in: 1.0, replicas: 8, step: 0.01 };
        let est = estimate_fbar(&b, &b.zeros(), 0.0, &b.zeros(), &co, &p, 3).unwrap();
        assert!(est.mean.coeffs()[0].abs() < 4.0 * est.stderr[0]);
        assert!(est.mean.norm() < 4.0 * est.stderr_norm());
    }

    #[test]
    fn linear_structure_detection() {
        assert_eq!(detect_linear_structure(&coeffs("v", "-v+1", "0", "1")), Some(LinearStructure { g1: -1.0 }));
        let lin = detect_linear_structure(&coeffs("v*tanh(u) + xi", "-2*v + sin(u) + x", "0", "0.5")).unwrap();
        assert!((lin.g1 + 2.0).abs() < 1e-12);
        assert_eq!(detect_linear_structure(&coeffs("v^2", "-v", "0", "0")), None);
        assert_eq!(detect_linear_structure(&coeffs("v", "-v*u", "0", "0")), None);
        assert_eq!(detect_linear_structure(&coeffs("v", "-tanh(v)", "0", "0")), None);
    }

    #[test]
    fn linear_elliptic_matches_long_deterministic_run() {
        let b = basis();
        let co = coeffs("2*v", "-v + 1 + 0.5*tanh(u)", "0", "0");
        let u = b.project_fn(|x| 2.0 * (PI * x).sin());
        let field = AveragedField::linear_elliptic(&co).unwrap();
        let fbar = field.eval(&b, &u, 0.0).unwrap();
        let stream = NoiseStream::new(1, Channel::W2, 0, 0.01).unwrap();
        let path = simulate_frozen_fast_spde(&b, &u, 0.0, &b.zeros(), &co, 5.0, 0.01, &stream).unwrap();
        close(&fbar, &path.last().unwrap().scaled(2.0), 1e-12);
    }

    #[test]
    fn ergodic_cache_is_keyed_on_rounded_state() {
        let b = basis();
        let co = coeffs("v", "-v+1", "0", "0.5");
        let p = ErgodicParams { t_avg: 2.0, burn_in: 0.5, replicas: 2, step: 0.01 };
        let erg = ErgodicField::new(co, p, b.zeros(), 7).unwrap();
        let u = b.project_fn(|x| x * (1.0 - x));
        let a = erg.estimate(&b, &u, 0.3).unwrap();
        let mut nudged = u.clone();
        nudged.coeffs_mut()[0] += 1e-9;
        let c = erg.estimate(&b, &nudged, 0.3 + 1e-9).unwrap();
        assert_eq!(a, c);
        assert_eq!(erg.cached_entries(), 1);
        let fresh = ErgodicField::new(erg.coeffs.clone(), erg.params.clone(), b.zeros(), 7).unwrap();
        assert_eq!(fresh.estimate(&b, &nudged, 0.3).unwrap(), a);
    }

    #[test]
    fn contraction_rate_for_additive_noise() {
        let b = basis();
        let mut co = coeffs("0", "-v", "0", "0.5");
        co.constants = Constants { alpha: Some(1.0), k_sigma2: Some(0.0), ..Default::default() };
        let e1 = Field::mode(16, 1);
        let fit = measure_contraction(&b, &b.zeros(), &e1, &b.zeros(), 0.0, &co, 0.2, 0.001, 2, 1).unwrap();
        let k = 2.0 * (PI * PI + 1.0);
        assert!((fit.kappa_hat - k).abs() < 1e-9 * k, "{}", fit.kappa_hat);
        assert!((fit.kappa_theory.unwrap() - k).abs() < 1e-12);
        assert!(matches!(
            measure_contraction(&b, &b.zeros(), &e1, &e1, 0.0, &co, 0.2, 0.001, 2, 1),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn contraction_with_multiplicative_noise_beats_bound() {
        let b = basis();
        let co = coeffs("0", "-v", "0", "0.1*tanh(v)");
        let v0 = b.project_fn(|x| (PI * x).sin() + 0.5 * (3.0 * PI * x).sin());
        let fit = measure_contraction(&b, &b.zeros(), &v0, &b.zeros(), 0.0, &co, 0.3, 0.001, 8, 4).unwrap();
        assert!(fit.kappa_hat >= 2.0 * PI * PI + 2.0 - 0.01 - 0.05, "{}", fit.kappa_hat);
        assert!(fit.mean_gap_sq.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn energy_residual_exact_without_forcing() {
        let b = EigenBasis::new(32, 65).unwrap();
        let u0 = Field::from_coeffs((1..=32).map(|k| (-(k as f64)).exp() + 0.1 / k as f64).collect());
        let traj = simulate_slow_spde(&b, &u0, 0.0, &coeffs("0", "0", "0", "0"), 1.0, 0.01, None).unwrap();
        let led = energy_residual(&b, &traj, &coeffs("0", "0", "0", "0")).unwrap();
        assert!(led.max_abs_residual() <= 1e-10);
    }

    #[test]
    fn energy_residual_halves_with_step() {
        let b = basis();
        let co = coeffs("2*tanh(u)", "0", "0", "0");
        let u0 = b.project_fn(|x| (PI * x).sin());
        let res: Vec<f64> = [0.02, 0.01, 0.005]
            .iter()
            .map(|&h| {
                let t = simulate_slow_spde(&b, &u0, 0.0, &co, 1.0, h, None).unwrap();
                energy_residual(&b, &t, &co).unwrap().max_abs_residual()
            })
            .collect();
        for w in res.windows(2) {
            let r = w[1] / w[0];
            assert!((0.4..=0.6).contains(&r), "{res:?}");
        }
    }

    #[test]
    fn energy_single_step_weak_defect() {
        // u₀ = 0, f = 0, σ1 = 1: E[residual] = −h Σ_k P[1]_k² (1 − e^{−2λ_k h})
        let b = basis();
        let co = coeffs("0", "0", "1", "0");
        let h = 0.01;
        let one = b.project_fn(|_| 1.0);
        let defect: f64 = -h * one
            .coeffs()
            .iter()
            .zip(b.eigenvalues())
            .map(|(p, l)| p * p * -(-2.0 * l * h).exp_m1())
            .sum::<f64>();
        let n = 10_000u64;
        let vals: Vec<f64> = (0..n)
            .map(|r| {
                let s = NoiseStream::new(8, Channel::W1, r, h).unwrap();
                let t = simulate_slow_spde(&b, &b.zeros(), 0.0, &co, h, h, Some(&s)).unwrap();
                *energy_residual(&b, &t, &co).unwrap().residual.last().unwrap()
            })
            .collect();
        let (m, se) = mean_stderr(&vals);
        assert!((m - defect).abs() < 3.0 * se, "{m} ± {se} vs {defect}");
    }

    #[test]
    fn holder_deterministic_smooth_path_is_quadratic() {
        let b = basis();
        let co = coeffs("tanh(u)", "0", "0", "0");
        let u0 = b.project_fn(|x| (PI * x).sin());
        let dt = 1.0 / 4096.0;
        let t = simulate_slow_spde(&b, &u0, 0.0, &co, 1.0, dt, None).unwrap();
        let ens = vec![t.u.clone(), t.u.clone(), t.u];
        let lags: Vec<f64> = (6..=10).rev().map(|p| 2f64.powi(-p)).collect();
        let fit = holder_modulus(&ens, dt, 0.5, &lags).unwrap();
        assert!((fit.gamma - 2.0).abs() < 0.1, "{}", fit.gamma);
        assert!(fit.small_ensemble);
        assert!(holder_modulus(&ens, dt, 0.5, &[0.0, 0.1, 0.2]).is_err());
        assert!(holder_modulus(&ens, dt, 0.5, &lags[..2]).is_err());
    }

    #[test]
    fn holder_additive_noise_exponent() {
        let b = basis();
        let co = coeffs("0", "0", "1", "0");
        let dt = 1.0 / 1024.0;
        let ens: Vec<Vec<Field>> = (0..60u64)
            .into_par_iter()
            .map(|r| {
                let s = NoiseStream::new(12, Channel::W1, r, dt).unwrap();
                simulate_slow_spde(&b, &b.zeros(), 0.0, &co, 0.75, dt, Some(&s)).unwrap().u
            })
            .collect();
        let lags: Vec<f64> = (4..=8).rev().map(|p| 2f64.powi(-p)).collect();
        let fit = holder_modulus(&ens, dt, 0.5, &lags).unwrap();
        assert!(fit.gamma > 0.0 && fit.ci.0 > 0.0, "{fit:?}");
    }
}
