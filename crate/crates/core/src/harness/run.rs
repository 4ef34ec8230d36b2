//! Convergence studies over an `ε` ladder.

use std::fmt::{self, Write as _};

use rayon::prelude::*;

use super::config::{BbarMode, ExperimentConfig, FbarMode};
use super::table::{CurveRow, MomentRow, MomentTable, TimeKey};
use crate::averaging::{bound_expression, gap_estimators, run_replica, GapTable, InitialData, PartitionPlan, ReplicaGaps};
use crate::dsl::{parse_expr, CoefficientSet, ModelKind};
use crate::error::{Error, Result};
use crate::numerics::{step_ratio, EigenBasis};
use crate::sde::{tabulate_bbar, AveragedDrift, FastScale};
use crate::spde::{AveragedField, ErgodicField};
use crate::stats::{mean_stderr, normal_quantile, wilson_interval, SupStat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 1,
            Verdict::Inconclusive => 2,
        }
    }

    /// Worst of two verdicts, `Fail` before `Inconclusive`.
    pub fn and(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fail, _) | (_, Fail) => Fail,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Pass,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

/// Largest abort fraction of a rung still eligible for PASS/FAIL.
pub const MAX_ABORT_FRACTION: f64 = 0.01;

/// Everything shared by the rungs of one study.
pub struct Setup {
    pub model: ModelKind,
    pub basis: EigenBasis,
    pub coeffs: CoefficientSet,
    pub init: InitialData,
    pub bbar: AveragedDrift,
    pub fbar: Option<AveragedField>,
    /// Fine noise step shared by every rung.
    pub base_step: f64,
    pub replicas: usize,
    pub seed: u64,
    pub rho: f64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Fine noise step `macro / lcm(m_ε)`, `m_ε` the simulation steps per macro
/// step of each rung, so every rung sums the same Brownian increments.
pub fn base_step(cfg: &ExperimentConfig) -> Result<f64> {
    let mut l = 1usize;
    for &eps in &cfg.epsilons {
        let micro = FastScale::new(eps, cfg.rho)?.micro_step(cfg.macro_step);
        let m = step_ratio(cfg.macro_step, micro)?;
        l = l / gcd(l, m) * m;
        if l > 100_000 {
            return Err(Error::Config("epsilon ladder needs more than 1e5 noise substeps per macro step".into()));
        }
    }
    Ok(cfg.macro_step / l as f64)
}

impl Setup {
    /// Parse the coefficients, project initial data and build `b̄`, `f̄`.
    /// Tabulating an ergodic `b̄` is the expensive part.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let basis = cfg.basis()?;
        let coeffs = cfg.coefficient_set()?;
        let (u0, v0) = cfg.initial_fields()?;
        let init = InitialData { u0, v0: v0.clone(), xi0: cfg.initial.xi0, eta0: cfg.initial.eta0 };
        let bbar = match &cfg.bbar {
            BbarMode::ClosedForm { expr } => AveragedDrift::ClosedForm(parse_expr(expr)?),
            mode @ BbarMode::Ergodic { .. } => tabulate_bbar(
                &mode.grid().unwrap(),
                cfg.initial.eta0,
                &coeffs,
                &mode.params().unwrap(),
                cfg.seed,
            )?,
        };
        let fbar = match &cfg.fbar {
            None => None,
            Some(FbarMode::ClosedForm { expr }) => Some(AveragedField::ClosedForm(parse_expr(expr)?)),
            Some(FbarMode::LinearElliptic) => Some(AveragedField::linear_elliptic(&coeffs)?),
            Some(FbarMode::Ergodic { t_avg, burn_in, replicas, step }) => {
                let params = crate::sde::ErgodicParams {
                    t_avg: *t_avg,
                    burn_in: *burn_in,
                    replicas: *replicas,
                    step: *step,
                };
                let v0 = v0.clone().unwrap_or_else(|| basis.zeros());
                Some(AveragedField::Ergodic(ErgodicField::new(coeffs.clone(), params, v0, cfg.seed)?))
            }
        };
        Ok(Setup {
            model: cfg.model,
            basis,
            coeffs,
            init,
            bbar,
            fbar,
            base_step: base_step(cfg)?,
            replicas: cfg.replicas,
            seed: cfg.seed,
            rho: cfg.rho,
        })
    }
}

/// Replicas of one rung, in replica order.
pub struct RungRun {
    pub plan: PartitionPlan,
    pub gaps: Vec<ReplicaGaps>,
    pub aborted: usize,
    pub first_abort: Option<String>,
}

impl RungRun {
    pub fn abort_fraction(&self) -> f64 {
        self.aborted as f64 / (self.aborted + self.gaps.len()) as f64
    }
}

pub fn run_rung(setup: &Setup, plan: PartitionPlan) -> Result<RungRun> {
    let results: Vec<Result<ReplicaGaps>> = (0..setup.replicas as u64)
        .into_par_iter()
        .map(|r| {
            run_replica(
                setup.model,
                &setup.basis,
                &setup.coeffs,
                &setup.init,
                &plan,
                setup.fbar.as_ref(),
                &setup.bbar,
                setup.seed,
                r,
                setup.base_step,
                setup.rho,
            )
        })
        .collect();
    let mut gaps = Vec::with_capacity(results.len());
    let mut aborted = 0;
    let mut first_abort = None;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(g) => gaps.push(g),
            Err(e) if e.is_replica_failure() => {
                aborted += 1;
                first_abort.get_or_insert_with(|| format!("replica {r}: {e}"));
            }
            Err(e) => return Err(e),
        }
    }
    if gaps.is_empty() {
        return Err(Error::AllAborted(aborted));
    }
    Ok(RungRun { plan, gaps, aborted, first_abort })
}

/// Per-rung summary used by verdicts and reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RungSummary {
    pub epsilon: f64,
    /// Realized block length (two-field model).
    pub delta: Option<f64>,
    pub replicas: usize,
    pub aborted: usize,
    /// `P{sup_t ‖u − ū‖² > δ_tol}` with its stderr and 95% Wilson interval
    /// (single-field model).
    pub probability: Option<(f64, f64, (f64, f64))>,
    pub gaps: GapTable,
}

impl RungSummary {
    pub fn abort_fraction(&self) -> f64 {
        self.aborted as f64 / (self.aborted + self.replicas) as f64
    }
}

pub struct ConvergenceReport {
    pub model: ModelKind,
    pub table: MomentTable,
    pub curves: Vec<CurveRow>,
    /// In ladder order as configured.
    pub rungs: Vec<RungSummary>,
    pub verdict: Verdict,
    /// Decrease of the auxiliary gaps (two-field model).
    pub gap_verdict: Option<Verdict>,
    pub summary: String,
}

fn push_series(table: &mut MomentTable, eps: f64, name: &str, times: &[f64], series: &[&Vec<f64>], aborted: usize) {
    for (k, &t) in times.iter().enumerate() {
        let column: Vec<f64> = series.iter().map(|s| s[k]).collect();
        let (estimate, stderr) = mean_stderr(&column);
        table.push(MomentRow {
            epsilon: eps,
            statistic: name.into(),
            time: TimeKey::At(t),
            estimate,
            stderr,
            replicas: column.len(),
            aborted,
        });
    }
}

fn push_sup(table: &mut MomentTable, eps: f64, name: &str, s: &SupStat, aborted: usize) {
    table.push(MomentRow {
        epsilon: eps,
        statistic: name.into(),
        time: TimeKey::Sup,
        estimate: s.estimate,
        stderr: s.stderr,
        replicas: s.replicas,
        aborted,
    });
}

fn curve(name: &str, eps: f64, delta: Option<f64>, estimate: f64, stderr: f64) -> CurveRow {
    let z = normal_quantile(0.95);
    CurveRow {
        statistic: name.into(),
        epsilon: eps,
        delta,
        estimate,
        stderr,
        ci_low: estimate - z * stderr,
        ci_high: estimate + z * stderr,
    }
}

/// Indices of `rungs` by decreasing `ε`.
fn ladder_order(rungs: &[RungSummary]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rungs.len()).collect();
    idx.sort_by(|a, b| rungs[*b].epsilon.total_cmp(&rungs[*a].epsilon));
    idx
}

/// Each consecutive pair along the ladder decreases by more than two
/// combined standard errors.
pub fn decreases_within_stderr(stats: &[&SupStat]) -> bool {
    stats.windows(2).all(|w| {
        let (a, b) = (w[0], w[1]);
        a.estimate - b.estimate > 2.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
    })
}

fn inconclusive(rungs: &[RungSummary]) -> bool {
    rungs.iter().any(|r| r.abort_fraction() > MAX_ABORT_FRACTION)
}

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    match cfg.model {
        ModelKind::I => run_model1_convergence(cfg),
        ModelKind::II => run_model2_convergence(cfg),
    }
}

/// Single-field study: probability that the sup-distance on the macro grid
/// exceeds `δ_tol`, and the particle gap.
pub fn run_model1_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    if cfg.model != ModelKind::I {
        return Err(Error::Config("model 1 study needs model = 1".into()));
    }
    let setup = Setup::new(cfg)?;
    let mut table = MomentTable::default();
    let mut curves = Vec::new();
    let mut rungs = Vec::new();
    let mut notes = String::new();
    for &eps in &cfg.epsilons {
        let plan = PartitionPlan::new(eps, cfg.t_final, cfg.t_final, cfg.macro_step, cfg.rho)?;
        let run = run_rung(&setup, plan)?;
        let times = run.plan.macro_times();
        let n = run.gaps.len();
        let exceed: Vec<f64> =
            run.gaps.iter().map(|g| if g.sup_u_ubar() > cfg.delta_tol { 1.0 } else { 0.0 }).collect();
        let k = exceed.iter().filter(|x| **x > 0.0).count();
        let (p, p_se) = mean_stderr(&exceed);
        let ci = wilson_interval(k, n, 0.95);
        let gaps = gap_estimators(&run.gaps)?;
        table.push(MomentRow {
            epsilon: eps,
            statistic: "prob_sup_u_gap_exceeds_tol".into(),
            time: TimeKey::Sup,
            estimate: p,
            stderr: p_se,
            replicas: n,
            aborted: run.aborted,
        });
        push_sup(&mut table, eps, "u_gap", &gaps.u_ubar, run.aborted);
        push_sup(&mut table, eps, "xi_gap", &gaps.xi_xibar, run.aborted);
        push_series(&mut table, eps, "u_gap", &times, &run.gaps.iter().map(|g| &g.u_ubar).collect::<Vec<_>>(), run.aborted);
        push_series(&mut table, eps, "xi_gap", &times, &run.gaps.iter().map(|g| &g.xi_xibar).collect::<Vec<_>>(), run.aborted);
        curves.push(CurveRow {
            statistic: "prob_sup_u_gap_exceeds_tol".into(),
            epsilon: eps,
            delta: None,
            estimate: p,
            stderr: p_se,
            ci_low: ci.0,
            ci_high: ci.1,
        });
        curves.push(curve("u_gap", eps, None, gaps.u_ubar.estimate, gaps.u_ubar.stderr));
        curves.push(curve("xi_gap", eps, None, gaps.xi_xibar.estimate, gaps.xi_xibar.stderr));
        if let Some(a) = &run.first_abort {
            writeln!(notes, "  eps = {eps}: {} aborted, first: {a}", run.aborted).unwrap();
        }
        rungs.push(RungSummary {
            epsilon: eps,
            delta: None,
            replicas: n,
            aborted: run.aborted,
            probability: Some((p, p_se, ci)),
            gaps,
        });
    }
    let order = ladder_order(&rungs);
    let probs: Vec<f64> = order.iter().map(|&i| rungs[i].probability.unwrap().0).collect();
    let strictly = probs.windows(2).all(|w| w[1] < w[0]);
    let first = rungs[order[0]].probability.unwrap().2;
    let last = rungs[*order.last().unwrap()].probability.unwrap().2;
    let separated = order.len() >= 2 && last.1 < first.0;
    let verdict = if inconclusive(&rungs) {
        Verdict::Inconclusive
    } else if strictly && separated {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    let mut summary = format!("model 1 convergence, delta_tol = {}\n", cfg.delta_tol);
    summary.push_str("  epsilon    P(sup|u-ubar|^2 > tol)  95% Wilson CI        sup E|xi-xibar|^2    aborted\n");
    for &i in &order {
        let r = &rungs[i];
        let (p, _, ci) = r.probability.unwrap();
        writeln!(
            summary,
            "  {:<9}  {:<22.4} [{:.4}, {:.4}]     {:<.3e} ± {:.1e}    {}",
            r.epsilon, p, ci.0, ci.1, r.gaps.xi_xibar.estimate, r.gaps.xi_xibar.stderr, r.aborted
        )
        .unwrap();
    }
    summary.push_str(&notes);
    writeln!(summary, "verdict: {verdict}").unwrap();
    Ok(ConvergenceReport { model: ModelKind::I, table, curves, rungs, verdict, gap_verdict: None, summary })
}

/// Two-field study: mean-square sup gap with its Chebyshev column and the
/// auxiliary gaps under the block schedule.
pub fn run_model2_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    if cfg.model != ModelKind::II {
        return Err(Error::Config("model 2 study needs model = 2".into()));
    }
    let setup = Setup::new(cfg)?;
    let mut table = MomentTable::default();
    let mut curves = Vec::new();
    let mut rungs = Vec::new();
    let mut notes = String::new();
    if let Some(k) = setup.coeffs.constants.kappa(setup.basis.lambda1()) {
        if k <= 0.0 {
            writeln!(notes, "  warning: contraction margin 2 lambda_1 + 2 alpha - K_sigma2 = {k} is not positive").unwrap();
        }
    }
    for &eps in &cfg.epsilons {
        let plan = PartitionPlan::new(eps, cfg.delta_for(eps)?, cfg.t_final, cfg.macro_step, cfg.rho)?;
        let delta = plan.realized_delta();
        let run = run_rung(&setup, plan)?;
        let times = run.plan.macro_times();
        let gaps = gap_estimators(&run.gaps)?;
        let a = run.aborted;
        let named: [(&str, &SupStat, Box<dyn Fn(&ReplicaGaps) -> &Vec<f64>>); 5] = [
            ("u_gap", &gaps.u_ubar, Box::new(|g| &g.u_ubar)),
            ("v_vhat_gap", gaps.v_vhat.as_ref().unwrap(), Box::new(|g| g.v_vhat.as_ref().unwrap())),
            ("u_uhat_gap", gaps.u_uhat.as_ref().unwrap(), Box::new(|g| g.u_uhat.as_ref().unwrap())),
            ("uhat_ubar_gap", gaps.uhat_ubar.as_ref().unwrap(), Box::new(|g| g.uhat_ubar.as_ref().unwrap())),
            ("xi_gap", &gaps.xi_xibar, Box::new(|g| &g.xi_xibar)),
        ];
        for (name, s, _) in &named {
            push_sup(&mut table, eps, name, s, a);
            curves.push(curve(name, eps, Some(delta), s.estimate, s.stderr));
        }
        let cheb = SupStat {
            estimate: gaps.u_ubar.estimate / cfg.delta_tol,
            stderr: gaps.u_ubar.stderr / cfg.delta_tol,
            ..gaps.u_ubar.clone()
        };
        push_sup(&mut table, eps, "chebyshev_bound", &cheb, a);
        curves.push(curve("chebyshev_bound", eps, Some(delta), cheb.estimate, cheb.stderr));
        let shape = bound_expression(eps, cfg.gamma, 1.0)?;
        curves.push(curve("bound_shape", eps, Some(delta), shape, 0.0));
        for (name, _, get) in &named {
            let series: Vec<&Vec<f64>> = run.gaps.iter().map(|g| get(g)).collect();
            push_series(&mut table, eps, name, &times, &series, a);
        }
        if let Some(f) = &run.first_abort {
            writeln!(notes, "  eps = {eps}: {a} aborted, first: {f}").unwrap();
        }
        rungs.push(RungSummary {
            epsilon: eps,
            delta: Some(delta),
            replicas: run.gaps.len(),
            aborted: a,
            probability: None,
            gaps,
        });
    }
    let order = ladder_order(&rungs);
    let along = |f: &dyn Fn(&GapTable) -> &SupStat| -> Vec<&SupStat> { order.iter().map(|&i| f(&rungs[i].gaps)).collect() };
    let main_ok = decreases_within_stderr(&along(&|g| &g.u_ubar));
    let gaps_ok = decreases_within_stderr(&along(&|g| g.v_vhat.as_ref().unwrap()))
        && decreases_within_stderr(&along(&|g| g.u_uhat.as_ref().unwrap()));
    let pick = |ok: bool| {
        if inconclusive(&rungs) {
            Verdict::Inconclusive
        } else if ok && order.len() >= 2 {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    };
    let verdict = pick(main_ok);
    let gap_verdict = pick(gaps_ok);
    let mut summary = format!("model 2 convergence, delta_tol = {}\n", cfg.delta_tol);
    summary.push_str(
        "  epsilon    delta      sup E|u-ubar|^2       chebyshev  sup E|v-vhat|^2       sup E|u-uhat|^2       sup E|uhat-ubar|^2    aborted\n",
    );
    for &i in &order {
        let r = &rungs[i];
        let g = &r.gaps;
        let cell = |s: &SupStat| format!("{:.3e} ± {:.1e}", s.estimate, s.stderr);
        writeln!(
            summary,
            "  {:<9}  {:<9.5}  {:<20}  {:<9.4}  {:<20}  {:<20}  {:<20}  {}",
            r.epsilon,
            r.delta.unwrap(),
            cell(&g.u_ubar),
            g.u_ubar.estimate / cfg.delta_tol,
            cell(g.v_vhat.as_ref().unwrap()),
            cell(g.u_uhat.as_ref().unwrap()),
            cell(g.uhat_ubar.as_ref().unwrap()),
            r.aborted
        )
        .unwrap();
    }
    summary.push_str(&notes);
    writeln!(summary, "verdict: {verdict}").unwrap();
    writeln!(summary, "auxiliary gap trend: {gap_verdict}").unwrap();
    Ok(ConvergenceReport {
        model: ModelKind::II,
        table,
        curves,
        rungs,
        verdict,
        gap_verdict: Some(gap_verdict),
        summary,
    })
}

/// Projected wall time of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct CostEstimate {
    pub seconds: f64,
    pub threads: usize,
    pub detail: String,
}

/// Seconds per multiply-add of a transform and per expression evaluation,
/// measured on a desk machine; the estimate is only a guard.
const TRANSFORM_COST: f64 = 1.0e-9;
const EVAL_COST: f64 = 4.0e-8;

fn step_cost(n: usize, m: usize, transforms: f64, evals: f64) -> f64 {
    transforms * (n * m) as f64 * TRANSFORM_COST + evals * m as f64 * EVAL_COST
}

pub fn estimate_cost(cfg: &ExperimentConfig, threads: usize) -> Result<CostEstimate> {
    let threads = threads.max(1);
    let (n, m) = (cfg.n_modes, cfg.grid_points);
    let per_step = match cfg.model {
        ModelKind::I => step_cost(n, m, 4.0, 2.0),
        ModelKind::II => step_cost(n, m, 20.0, 10.0),
    };
    let mut total = 0.0;
    let mut detail = String::new();
    for &eps in &cfg.epsilons {
        let micro = FastScale::new(eps, cfg.rho)?.micro_step(cfg.macro_step);
        let steps = (cfg.t_final / micro).round();
        let mut s = cfg.replicas as f64 * steps * per_step;
        if let Some(FbarMode::Ergodic { t_avg, replicas, step, .. }) = &cfg.fbar {
            let macro_steps = (cfg.t_final / cfg.macro_step).round();
            s += cfg.replicas as f64 * macro_steps * *replicas as f64 * (t_avg / step) * step_cost(n, m, 6.0, 4.0);
        }
        writeln!(detail, "  eps = {eps}: {steps} steps x {} replicas ~ {:.1} s", cfg.replicas, s / threads as f64).unwrap();
        total += s;
    }
    if let BbarMode::Ergodic { t_avg, replicas, step, nodes, .. } = &cfg.bbar {
        let s = *nodes as f64 * *replicas as f64 * (t_avg / step) * 4.0 * EVAL_COST;
        writeln!(detail, "  bbar table: {nodes} nodes ~ {:.1} s", s / threads as f64).unwrap();
        total += s;
    }
    Ok(CostEstimate { seconds: total / threads as f64, threads, detail })
}
