//! Full slow-fast systems, Khasminskii auxiliary processes on the
//! `δ`-partition, effective (averaged) systems and the gap statistics.
//!
//! Every component of one replica is advanced on the same simulation grid
//! `h_sim ≤ ρ ε` and consumes the same recorded Brownian increments, so
//! differences between components reflect the dynamics and not the noise.

use crate::dsl::{CoefficientSet, ModelKind};
use crate::error::{Error, Result};
use crate::numerics::{step_count, step_ratio, Channel, EigenBasis, Field, GridArgs, NoiseStream};
use crate::sde::{step_coupled_sde, step_effective_xi, AveragedDrift, FastScale, MicroState};
use crate::spde::{exp_euler, fast_update, grid_field, slow_update, AveragedField, FastOp};
use crate::stats::{moment_sup, SupStat};

/// `δ = ε √(−ln ε)`.
pub fn delta_schedule(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("delta schedule needs 0 < eps < 1, got {eps}")));
    }
    Ok(eps * (-eps.ln()).sqrt())
}

/// `δ^γ + ε/δ + (δ^{1+γ}/ε) e^{Cδ/ε}` with `δ` from [`delta_schedule`].
pub fn bound_expression(eps: f64, gamma: f64, c: f64) -> Result<f64> {
    let d = delta_schedule(eps)?;
    Ok(d.powf(gamma) + eps / d + d.powf(1.0 + gamma) / eps * (c * d / eps).exp())
}

/// Time grids of one `ε` rung.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub eps: f64,
    pub t_final: f64,
    /// Step of the recorded statistics.
    pub macro_step: f64,
    /// Simulation step, the largest divisor of `macro_step` not above `ρ ε`.
    pub micro_step: f64,
    /// Requested block length.
    pub delta: f64,
    /// Simulation steps per block; the realized block length is
    /// `block_steps · micro_step`.
    pub block_steps: usize,
    pub n_steps: usize,
    pub steps_per_macro: usize,
}

impl PartitionPlan {
    pub fn new(eps: f64, delta: f64, t_final: f64, macro_step: f64, rho: f64) -> Result<Self> {
        let scale = FastScale::new(eps, rho)?;
        if !(delta > 0.0 && delta <= t_final) {
            return Err(Error::InvalidArgument(format!("need 0 < delta <= T, got delta = {delta}, T = {t_final}")));
        }
        let n_macro = step_count(t_final, macro_step)?;
        let micro_step = scale.micro_step(macro_step);
        let steps_per_macro = step_ratio(macro_step, micro_step)?;
        let block_steps = ((delta / micro_step).round() as usize).max(1);
        Ok(PartitionPlan {
            eps,
            t_final,
            macro_step,
            micro_step,
            delta,
            block_steps,
            n_steps: n_macro * steps_per_macro,
            steps_per_macro,
        })
    }

    pub fn realized_delta(&self) -> f64 {
        self.block_steps as f64 * self.micro_step
    }

    /// Index of the first simulation step of the block containing step `i`.
    pub fn block_start(&self, i: usize) -> usize {
        i / self.block_steps * self.block_steps
    }

    pub fn n_macro(&self) -> usize {
        self.n_steps / self.steps_per_macro
    }

    pub fn macro_times(&self) -> Vec<f64> {
        (0..=self.n_macro()).map(|k| k as f64 * self.macro_step).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitialData {
    pub u0: Field,
    /// Required by the two-field model.
    pub v0: Option<Field>,
    pub xi0: f64,
    pub eta0: f64,
}

/// Brownian increments of one replica at the simulation step: `W` (single
/// noise model) or `W¹, W², W³`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecord {
    pub w1: Option<Vec<f64>>,
    pub w2: Option<Vec<f64>>,
    /// `W` in the single-noise model, `W³` otherwise: drives `ξ` and `η`.
    pub w_micro: Vec<f64>,
}

impl NoiseRecord {
    /// Increments of replica `replica` summed from the base step to the plan's
    /// simulation step.
    pub fn draw(model: ModelKind, seed: u64, replica: u64, base_step: f64, plan: &PartitionPlan) -> Result<Self> {
        let take = |channel: Channel| -> Result<Vec<f64>> {
            let s = NoiseStream::new(seed, channel, replica, base_step)?;
            s.coarse_increments(0, plan.n_steps, s.factor_for(plan.micro_step)?)
        };
        Ok(match model {
            ModelKind::I => NoiseRecord { w1: None, w2: None, w_micro: take(Channel::W)? },
            ModelKind::II => NoiseRecord {
                w1: Some(take(Channel::W1)?),
                w2: Some(take(Channel::W2)?),
                w_micro: take(Channel::W3)?,
            },
        })
    }
}

/// Full-system path at every simulation step, with its noise record.
#[derive(Clone, Debug, PartialEq)]
pub struct FullTrajectory {
    pub u: Vec<Field>,
    pub v: Option<Vec<Field>>,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub noise: NoiseRecord,
}

fn finite_field(f: &Field, component: &'static str, t: f64) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::BlowUp { component, t })
    }
}

/// Simulate the full system. Model I: `u_t = Δu + f(u, ξ)` with `(ξ, η)`
/// driven by one `W`. Model II adds the fast field `v` and the noises `W¹`,
/// `W²`; `ξ` and `η` share `W³`.
pub fn simulate_full_system(
    model: ModelKind,
    basis: &EigenBasis,
    coeffs: &CoefficientSet,
    init: &InitialData,
    plan: &PartitionPlan,
    noise: NoiseRecord,
    rho: f64,
) -> Result<FullTrajectory> {
    let n = plan.n_steps;
    let h = plan.micro_step;
    let scale = FastScale::new(plan.eps, rho)?;
    let slow = basis.step_factors(h);
    let fast = FastOp::new(basis, coeffs, h / plan.eps);
    let sqrt_eps = plan.eps.sqrt();
    if noise.w_micro.len() != n {
        return Err(Error::MissingNoise("micro"));
    }
    let two_field = model == ModelKind::II;
    let (w1, w2) = if two_field {
        let w1 = noise.w1.as_ref().filter(|w| w.len() == n).ok_or(Error::MissingNoise("W1"))?;
        let w2 = noise.w2.as_ref().filter(|w| w.len() == n).ok_or(Error::MissingNoise("W2"))?;
        (Some(w1), Some(w2))
    } else {
        (None, None)
    };
    let mut u = init.u0.clone();
    basis.check(&u)?;
    let mut v = if two_field {
        let v0 = init.v0.clone().ok_or_else(|| Error::InvalidArgument("two-field model needs v0".into()))?;
        basis.check(&v0)?;
        Some(v0)
    } else {
        None
    };
    let mut micro = MicroState { xi: init.xi0, eta: init.eta0, t: 0.0 };
    let mut us = Vec::with_capacity(n + 1);
    let mut vs = v.as_ref().map(|_| Vec::with_capacity(n + 1));
    let mut xis = Vec::with_capacity(n + 1);
    let mut etas = Vec::with_capacity(n + 1);
    us.push(u.clone());
    if let (Some(vs), Some(v)) = (&mut vs, &v) {
        vs.push(v.clone());
    }
    xis.push(micro.xi);
    etas.push(micro.eta);
    for i in 0..n {
        let t = (i + 1) as f64 * h;
        let ug = basis.synthesize(&u)?;
        let vg = v.as_ref().map(|v| basis.synthesize(v)).transpose()?;
        let dw1 = w1.map_or(0.0, |w| w[i]);
        let u_next = slow_update(basis, &slow, coeffs, &u, &ug, vg.as_deref(), &ug, micro.xi, dw1)?;
        finite_field(&u_next, "slow field", t)?;
        if let (Some(vv), Some(vg), Some(w2)) = (&v, &vg, w2) {
            let v_next = fast_update(basis, &fast, coeffs, vv, &ug, vg, micro.xi, w2[i] / sqrt_eps)?;
            finite_field(&v_next, "fast field", t)?;
            v = Some(v_next);
        }
        micro = step_coupled_sde(micro, coeffs, &scale, h, noise.w_micro[i])?;
        u = u_next;
        us.push(u.clone());
        if let (Some(vs), Some(v)) = (&mut vs, &v) {
            vs.push(v.clone());
        }
        xis.push(micro.xi);
        etas.push(micro.eta);
    }
    Ok(FullTrajectory { u: us, v: vs, xi: xis, eta: etas, noise })
}

/// Auxiliary processes at every simulation step.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryPair {
    pub u_hat: Vec<Field>,
    pub v_hat: Vec<Field>,
}

/// Khasminskii auxiliary processes. On each block `[kδ, (k+1)δ)`, `v̂`
/// restarts from `v(kδ)` and follows the fast equation with `u` frozen at
/// `u(kδ)`; `û` starts from `u₀` with drift `f(u(kδ), v̂, ξ)` and diffusion
/// `σ1(u)` along the true slow path. Both reuse the recorded `W¹`, `W²`.
pub fn build_auxiliary_pair(
    basis: &EigenBasis,
    full: &FullTrajectory,
    plan: &PartitionPlan,
    coeffs: &CoefficientSet,
) -> Result<AuxiliaryPair> {
    let n = plan.n_steps;
    let vs = full.v.as_ref().ok_or_else(|| Error::InvalidArgument("auxiliary pair needs the fast field".into()))?;
    let w1 = full.noise.w1.as_ref().filter(|w| w.len() == n).ok_or(Error::MissingNoise("W1"))?;
    let w2 = full.noise.w2.as_ref().filter(|w| w.len() == n).ok_or(Error::MissingNoise("W2"))?;
    if full.u.len() != n + 1 || vs.len() != n + 1 || full.xi.len() != n + 1 {
        return Err(Error::InvalidArgument("trajectory length does not match the plan".into()));
    }
    let h = plan.micro_step;
    let slow = basis.step_factors(h);
    let fast = FastOp::new(basis, coeffs, h / plan.eps);
    let sqrt_eps = plan.eps.sqrt();
    let mut u_hat = Vec::with_capacity(n + 1);
    let mut v_hat = Vec::with_capacity(n + 1);
    let mut uh = full.u[0].clone();
    let mut vh = vs[0].clone();
    let mut frozen_ug = basis.synthesize(&full.u[0])?;
    u_hat.push(uh.clone());
    v_hat.push(vh.clone());
    for i in 0..n {
        let t = (i + 1) as f64 * h;
        if i % plan.block_steps == 0 {
            vh = vs[i].clone();
            frozen_ug = basis.synthesize(&full.u[i])?;
        }
        let vhg = basis.synthesize(&vh)?;
        let ug = basis.synthesize(&full.u[i])?;
        let xi = full.xi[i];
        let uh_next = slow_update(basis, &slow, coeffs, &uh, &frozen_ug, Some(&vhg), &ug, xi, w1[i])?;
        finite_field(&uh_next, "auxiliary slow field", t)?;
        vh = fast_update(basis, &fast, coeffs, &vh, &frozen_ug, &vhg, xi, w2[i] / sqrt_eps)?;
        finite_field(&vh, "auxiliary fast field", t)?;
        uh = uh_next;
        u_hat.push(uh.clone());
        v_hat.push(vh.clone());
    }
    Ok(AuxiliaryPair { u_hat, v_hat })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveTrajectory {
    pub u_bar: Vec<Field>,
    pub xi_bar: Vec<f64>,
}

/// Effective system on the recorded noise. Model I: `ū_t = Δū + f(ū, ξ̄)`.
/// Model II: `dū = [Δū + f̄(ū, ξ̄)] dt + σ1(ū) dW¹`. In both, `ξ̄` follows
/// `dξ̄ = b̄(ξ̄) dt + σ3(ξ̄) dW` on the micro channel. Ergodic `f̄` is
/// refreshed at macro steps, other modes at every simulation step.
#[allow(clippy::too_many_arguments)]
pub fn integrate_effective_system(
    model: ModelKind,
    basis: &EigenBasis,
    init: &InitialData,
    fbar: Option<&AveragedField>,
    bbar: &AveragedDrift,
    coeffs: &CoefficientSet,
    plan: &PartitionPlan,
    noise: &NoiseRecord,
) -> Result<EffectiveTrajectory> {
    let n = plan.n_steps;
    let h = plan.micro_step;
    let slow = basis.step_factors(h);
    if noise.w_micro.len() != n {
        return Err(Error::MissingNoise("micro"));
    }
    let w1 = match model {
        ModelKind::I => None,
        ModelKind::II => Some(noise.w1.as_ref().filter(|w| w.len() == n).ok_or(Error::MissingNoise("W1"))?),
    };
    let fbar = match model {
        ModelKind::I => None,
        ModelKind::II => Some(fbar.ok_or_else(|| Error::InvalidArgument("two-field effective system needs f̄".into()))?),
    };
    let mut ub = init.u0.clone();
    basis.check(&ub)?;
    let mut xb = init.xi0;
    let mut u_bar = Vec::with_capacity(n + 1);
    let mut xi_bar = Vec::with_capacity(n + 1);
    u_bar.push(ub.clone());
    xi_bar.push(xb);
    let mut held: Option<Field> = None;
    for i in 0..n {
        let t = (i + 1) as f64 * h;
        let ug = basis.synthesize(&ub)?;
        let next = match (fbar, w1) {
            (Some(fb), Some(w1)) => {
                let drift = if fb.is_expensive() {
                    if i % plan.steps_per_macro == 0 || held.is_none() {
                        held = Some(fb.eval(basis, &ub, xb)?);
                    }
                    held.clone().unwrap()
                } else {
                    fb.eval(basis, &ub, xb)?
                };
                let sigma = grid_field(basis, &coeffs.sigma1, &GridArgs { u: Some(&ug), ..Default::default() })?;
                exp_euler(&slow, &ub, Some(&drift), sigma.as_ref(), w1[i])
            }
            _ => slow_update(basis, &slow, coeffs, &ub, &ug, None, &ug, xb, 0.0)?,
        };
        finite_field(&next, "effective slow field", t)?;
        xb = step_effective_xi(xb, bbar, &coeffs.sigma3, h, noise.w_micro[i])?;
        if !xb.is_finite() {
            return Err(Error::BlowUp { component: "effective particle", t });
        }
        ub = next;
        u_bar.push(ub.clone());
        xi_bar.push(xb);
    }
    Ok(EffectiveTrajectory { u_bar, xi_bar })
}

/// Per-replica squared gaps on the macro grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaGaps {
    pub u_ubar: Vec<f64>,
    pub xi_xibar: Vec<f64>,
    pub v_vhat: Option<Vec<f64>>,
    pub u_uhat: Option<Vec<f64>>,
    pub uhat_ubar: Option<Vec<f64>>,
}

impl ReplicaGaps {
    pub fn collect(
        plan: &PartitionPlan,
        full: &FullTrajectory,
        aux: Option<&AuxiliaryPair>,
        eff: &EffectiveTrajectory,
    ) -> Result<Self> {
        let idx: Vec<usize> = (0..=plan.n_macro()).map(|k| k * plan.steps_per_macro).collect();
        let fields = |a: &[Field], b: &[Field]| -> Result<Vec<f64>> {
            idx.iter().map(|&i| a[i].distance_sq(&b[i])).collect()
        };
        let xi_gap = crate::sde::squared_gap(&full.xi, &eff.xi_bar)?;
        Ok(ReplicaGaps {
            u_ubar: fields(&full.u, &eff.u_bar)?,
            xi_xibar: idx.iter().map(|&i| xi_gap[i]).collect(),
            v_vhat: match (aux, &full.v) {
                (Some(a), Some(v)) => Some(fields(v, &a.v_hat)?),
                _ => None,
            },
            u_uhat: aux.map(|a| fields(&full.u, &a.u_hat)).transpose()?,
            uhat_ubar: aux.map(|a| fields(&a.u_hat, &eff.u_bar)).transpose()?,
        })
    }

    /// `sup_t ‖u − ū‖²` over the macro grid.
    pub fn sup_u_ubar(&self) -> f64 {
        self.u_ubar.iter().fold(0.0, |m, x| m.max(*x))
    }
}

/// Sup-over-time ensemble statistics of the gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct GapTable {
    pub u_ubar: SupStat,
    pub xi_xibar: SupStat,
    pub v_vhat: Option<SupStat>,
    pub u_uhat: Option<SupStat>,
    pub uhat_ubar: Option<SupStat>,
}

pub fn gap_estimators(ensemble: &[ReplicaGaps]) -> Result<GapTable> {
    if ensemble.is_empty() {
        return Err(Error::InvalidArgument("gap estimators need a nonempty ensemble".into()));
    }
    let pick = |f: &dyn Fn(&ReplicaGaps) -> Option<&Vec<f64>>| -> Result<Option<SupStat>> {
        let series: Option<Vec<Vec<f64>>> = ensemble.iter().map(|r| f(r).cloned()).collect();
        series.map(|s| moment_sup(&s)).transpose()
    };
    Ok(GapTable {
        u_ubar: pick(&|r| Some(&r.u_ubar))?.unwrap(),
        xi_xibar: pick(&|r| Some(&r.xi_xibar))?.unwrap(),
        v_vhat: pick(&|r| r.v_vhat.as_ref())?,
        u_uhat: pick(&|r| r.u_uhat.as_ref())?,
        uhat_ubar: pick(&|r| r.uhat_ubar.as_ref())?,
    })
}

/// One replica end to end: noise, full system, auxiliary pair (Model II),
/// effective system and gaps.
#[allow(clippy::too_many_arguments)]
pub fn run_replica(
    model: ModelKind,
    basis: &EigenBasis,
    coeffs: &CoefficientSet,
    init: &InitialData,
    plan: &PartitionPlan,
    fbar: Option<&AveragedField>,
    bbar: &AveragedDrift,
    seed: u64,
    replica: u64,
    base_step: f64,
    rho: f64,
) -> Result<ReplicaGaps> {
    let noise = NoiseRecord::draw(model, seed, replica, base_step, plan)?;
    let full = simulate_full_system(model, basis, coeffs, init, plan, noise, rho)?;
    let aux = match model {
        ModelKind::I => None,
        ModelKind::II => Some(build_auxiliary_pair(basis, &full, plan, coeffs)?),
    };
    let eff = integrate_effective_system(model, basis, init, fbar, bbar, coeffs, plan, &full.noise)?;
    ReplicaGaps::collect(plan, &full, aux.as_ref(), &eff)
}
