//! Microscopic pair `(ξ, η)`: coupled Euler–Maruyama stepping, the frozen
//! fast process `η^ξ`, ergodic estimation of `b̄` and the effective `ξ̄`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsl::{CoefficientSet, Expr};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, step_count, Channel, NoiseStream};
use crate::stats::mean_stderr;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MicroState {
    pub xi: f64,
    pub eta: f64,
    pub t: f64,
}

/// Scale separation `ε` with the stability factor `ρ` bounding the micro
/// step by `ρ ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FastScale {
    eps: f64,
    rho: f64,
}

pub const MAX_RHO: f64 = 0.5;

impl FastScale {
    pub fn new(eps: f64, rho: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
        }
        if !(rho > 0.0 && rho <= MAX_RHO) {
            return Err(Error::InvalidArgument(format!("rho must lie in (0, {MAX_RHO}], got {rho}")));
        }
        Ok(FastScale { eps, rho })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn max_step(&self) -> f64 {
        self.rho * self.eps
    }

    pub fn check_step(&self, h: f64) -> Result<()> {
        let limit = self.max_step();
        if !(h > 0.0) || h > limit * (1.0 + 1e-12) {
            return Err(Error::StepSize { h, limit, rho: self.rho, eps: self.eps });
        }
        Ok(())
    }

    /// Largest step `≤ ρ ε` dividing `macro_step` into an integer count.
    pub fn micro_step(&self, macro_step: f64) -> f64 {
        let n = (macro_step / self.max_step() - 1e-9).ceil().max(1.0);
        macro_step / n
    }
}

pub(crate) fn eval_scalar(e: &Expr, xi: f64, eta: f64) -> Result<f64> {
    Ok(e.eval_raw(&[0.0, 0.0, xi, eta, 0.0])?)
}

fn finite(state: MicroState) -> Result<MicroState> {
    if state.xi.is_finite() && state.eta.is_finite() {
        Ok(state)
    } else {
        Err(Error::BlowUp { component: "micro pair", t: state.t })
    }
}

/// One Euler–Maruyama step of the coupled pair; `ξ` and `η` are driven by the
/// same increment `dw`.
pub fn step_coupled_sde(
    state: MicroState,
    coeffs: &CoefficientSet,
    scale: &FastScale,
    h: f64,
    dw: f64,
) -> Result<MicroState> {
    scale.check_step(h)?;
    let MicroState { xi, eta, t } = state;
    let eps = scale.eps;
    let b = eval_scalar(&coeffs.b, xi, eta)?;
    let s3 = eval_scalar(&coeffs.sigma3, xi, eta)?;
    let bb = eval_scalar(&coeffs.big_b, xi, eta)?;
    let s4 = eval_scalar(&coeffs.sigma4, xi, eta)?;
    finite(MicroState {
        xi: xi + b * h + s3 * dw,
        eta: eta + bb * h / eps + s4 * dw / eps.sqrt(),
        t: t + h,
    })
}

/// Euler–Maruyama path of `dη = B(ξ, η) dt + σ4(ξ, η) dW` with `ξ` frozen,
/// recorded at every step (length `T / h + 1`).
pub fn simulate_frozen_fast_sde(
    xi: f64,
    y0: f64,
    coeffs: &CoefficientSet,
    t_final: f64,
    h: f64,
    stream: &NoiseStream,
) -> Result<Vec<f64>> {
    let n = step_count(t_final, h)?;
    let factor = stream.factor_for(h)?;
    let mut cursor = stream.cursor(0);
    let mut eta = y0;
    let mut path = Vec::with_capacity(n + 1);
    path.push(eta);
    for i in 0..n {
        let dw = cursor.next_coarse(factor);
        eta += eval_scalar(&coeffs.big_b, xi, eta)? * h + eval_scalar(&coeffs.sigma4, xi, eta)? * dw;
        if !eta.is_finite() {
            return Err(Error::BlowUp { component: "frozen fast particle", t: (i + 1) as f64 * h });
        }
        path.push(eta);
    }
    Ok(path)
}

/// Parameters of a time-and-ensemble average along a frozen fast process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicParams {
    /// Length of each frozen path.
    pub t_avg: f64,
    /// Initial portion of each path excluded from the average.
    #[serde(default)]
    pub burn_in: f64,
    pub replicas: usize,
    pub step: f64,
}

impl ErgodicParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_avg > self.burn_in && self.burn_in >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need t_avg > burn_in >= 0, got {} and {}",
                self.t_avg, self.burn_in
            )));
        }
        if self.replicas < 2 {
            return Err(Error::InvalidArgument("ergodic estimates need at least 2 replicas".into()));
        }
        let n = step_count(self.t_avg, self.step)?;
        if self.first_averaged_step() >= n {
            return Err(Error::InvalidArgument("burn-in leaves no steps to average".into()));
        }
        Ok(())
    }

    pub(crate) fn first_averaged_step(&self) -> usize {
        (self.burn_in / self.step - 1e-9).ceil().max(0.0) as usize
    }
}

/// Estimate `b̄(ξ)` by averaging `b(ξ, η^ξ(s))` over `s ∈ [burn_in, T)`
/// (left rule) and over replicas. Returns `(value, stderr)`, the stderr
/// computed from the spread of per-replica time averages.
pub fn estimate_bbar(
    xi: f64,
    y0: f64,
    coeffs: &CoefficientSet,
    params: &ErgodicParams,
    seed: u64,
) -> Result<(f64, f64)> {
    params.validate()?;
    let master = derive_seed(seed, "bbar");
    let first = params.first_averaged_step();
    let per_replica: Vec<f64> = (0..params.replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let stream = NoiseStream::new(master, Channel::W, r, params.step)?;
            let path = simulate_frozen_fast_sde(xi, y0, coeffs, params.t_avg, params.step, &stream)?;
            let window = &path[first..path.len() - 1];
            let mut acc = 0.0;
            for &eta in window {
                acc += eval_scalar(&coeffs.b, xi, eta)?;
            }
            Ok(acc / window.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&per_replica))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftTable {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AveragedDrift {
    /// Closed-form `b̄` as an expression in `xi`.
    ClosedForm(Expr),
    /// Piecewise-linear interpolation of estimates; evaluation outside the
    /// grid hull is an error.
    Tabulated(DriftTable),
}

impl AveragedDrift {
    pub fn tabulated(grid: Vec<f64>, values: Vec<f64>, stderr: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != values.len() || grid.len() != stderr.len() {
            return Err(Error::InvalidArgument("tabulated drift needs equal, nonempty columns".into()));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("tabulation grid must be strictly increasing".into()));
        }
        Ok(AveragedDrift::Tabulated(DriftTable { grid, values, stderr }))
    }

    pub fn eval(&self, xi: f64) -> Result<f64> {
        match self {
            AveragedDrift::ClosedForm(e) => eval_scalar(e, xi, 0.0),
            AveragedDrift::Tabulated(t) => {
                let (lo, hi) = (t.grid[0], *t.grid.last().unwrap());
                if !(xi >= lo && xi <= hi) {
                    return Err(Error::OutsideHull { xi, lo, hi });
                }
                if t.grid.len() == 1 {
                    return Ok(t.values[0]);
                }
                let i = t.grid.partition_point(|g| *g <= xi).clamp(1, t.grid.len() - 1);
                let (x0, x1) = (t.grid[i - 1], t.grid[i]);
                let w = (xi - x0) / (x1 - x0);
                Ok(t.values[i - 1] * (1.0 - w) + t.values[i] * w)
            }
        }
    }
}

/// `b̄` estimated at every node of `grid`.
pub fn tabulate_bbar(
    grid: &[f64],
    y0: f64,
    coeffs: &CoefficientSet,
    params: &ErgodicParams,
    seed: u64,
) -> Result<AveragedDrift> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("tabulation grid is empty".into()));
    }
    let est: Vec<(f64, f64)> =
        grid.par_iter().map(|&xi| estimate_bbar(xi, y0, coeffs, params, seed)).collect::<Result<_>>()?;
    let (values, stderr) = est.into_iter().unzip();
    AveragedDrift::tabulated(grid.to_vec(), values, stderr)
}

/// One Euler–Maruyama step of `dξ̄ = b̄(ξ̄) dt + σ3(ξ̄) dW`.
pub fn step_effective_xi(xi: f64, bbar: &AveragedDrift, sigma3: &Expr, h: f64, dw: f64) -> Result<f64> {
    Ok(xi + bbar.eval(xi)? * h + eval_scalar(sigma3, xi, 0.0)? * dw)
}

/// Effective slow path on the grid `0, h, .., T`, consuming the stream's
/// fine increments summed to steps of `h`.
pub fn integrate_effective_xi(
    x0: f64,
    bbar: &AveragedDrift,
    sigma3: &Expr,
    t_final: f64,
    h: f64,
    stream: &NoiseStream,
) -> Result<Vec<f64>> {
    let n = step_count(t_final, h)?;
    let factor = stream.factor_for(h)?;
    let mut cursor = stream.cursor(0);
    let mut xi = x0;
    let mut path = Vec::with_capacity(n + 1);
    path.push(xi);
    for i in 0..n {
        xi = step_effective_xi(xi, bbar, sigma3, h, cursor.next_coarse(factor))?;
        if !xi.is_finite() {
            return Err(Error::BlowUp { component: "effective particle", t: (i + 1) as f64 * h });
        }
        path.push(xi);
    }
    Ok(path)
}

/// Pathwise `|ξ − ξ̄|²` of two paths on the same grid.
pub fn squared_gap(xi: &[f64], xi_bar: &[f64]) -> Result<Vec<f64>> {
    if xi.len() != xi_bar.len() {
        return Err(Error::InvalidArgument(format!("paths have {} and {} points", xi.len(), xi_bar.len())));
    }
    Ok(xi.iter().zip(xi_bar).map(|(a, b)| (a - b).powi(2)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse_expr, CoefficientSpec};

    fn coeffs(b: &str, big_b: &str, s3: &str, s4: &str) -> CoefficientSet {
        CoefficientSet::from_exprs(&CoefficientSpec {
            b: b.into(),
            big_b: big_b.into(),
            sigma3: s3.into(),
            sigma4: s4.into(),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn rejects_large_steps_and_bad_rho() {
        let c = coeffs("0", "-eta", "0", "0");
        let s = FastScale::new(0.1, 0.1).unwrap();
        let st = MicroState { xi: 0.0, eta: 1.0, t: 0.0 };
        assert!(matches!(step_coupled_sde(st, &c, &s, 0.02, 0.0), Err(Error::StepSize { .. })));
        assert!(FastScale::new(0.1, 0.6).is_err());
        assert!(FastScale::new(0.0, 0.1).is_err());
    }

    #[test]
    fn xi_unchanged_without_drift_or_noise() {
        let c = coeffs("0", "-eta", "0", "1");
        let s = FastScale::new(0.1, 0.1).unwrap();
        let st = step_coupled_sde(MicroState { xi: 0.7, eta: 1.0, t: 0.0 }, &c, &s, 0.01, 0.3).unwrap();
        assert_eq!(st.xi, 0.7);
    }

    #[test]
    fn fast_decay_matches_exponential() {
        let c = coeffs("0", "-eta", "0", "0");
        let exact = (-1.0f64).exp();
        let mut errs = Vec::new();
        for n in [100usize, 200, 400] {
            let h = 0.1 / n as f64;
            let s = FastScale::new(0.1, 0.1).unwrap();
            let mut st = MicroState { xi: 0.0, eta: 1.0, t: 0.0 };
            for _ in 0..n {
                st = step_coupled_sde(st, &c, &s, h, 0.0).unwrap();
            }
            errs.push((st.eta - exact).abs());
        }
        assert!(errs[2] < 2e-3);
        // first order in h
        assert!((errs[0] / errs[1] - 2.0).abs() < 0.1 && (errs[1] / errs[2] - 2.0).abs() < 0.1);
    }

    #[test]
    fn shared_increment_gives_perfect_correlation() {
        let c = coeffs("sin(xi)", "-eta", "1", "1");
        let s = FastScale::new(0.1, 0.1).unwrap();
        let stream = NoiseStream::new(9, Channel::W, 0, 0.01).unwrap();
        let mut st = MicroState { xi: 0.3, eta: -0.2, t: 0.0 };
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..200 {
            let dw = stream.increment(i);
            let next = step_coupled_sde(st, &c, &s, 0.01, dw).unwrap();
            a.push(next.xi - st.xi - st.xi.sin() * 0.01);
            b.push(0.1f64.sqrt() * (next.eta - st.eta + st.eta * 0.01 / 0.1));
            st = next;
        }
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let c = coeffs("exp(xi)", "0", "0", "0");
        let s = FastScale::new(1.0, 0.5).unwrap();
        let mut st = MicroState { xi: 5.0, eta: 0.0, t: 0.0 };
        let mut failed = false;
        for _ in 0..100 {
            match step_coupled_sde(st, &c, &s, 0.5, 0.0) {
                Ok(n) => st = n,
                Err(e) => {
                    assert!(e.is_replica_failure());
                    failed = true;
                    break;
                }
            }
        }
        assert!(failed);
    }

    #[test]
    fn frozen_process_examples() {
        let stream = NoiseStream::new(3, Channel::W, 0, 0.01).unwrap();
        let c = coeffs("0", "-eta", "0", "0");
        let p = simulate_frozen_fast_sde(0.5, 0.0, &c, 5.0, 0.01, &stream).unwrap();
        assert!(p.iter().all(|e| *e == 0.0));
        assert_eq!(p.len(), 501);

        let c = coeffs("0", "xi - eta", "0", "0");
        let p = simulate_frozen_fast_sde(1.5, -3.0, &c, 20.0, 0.01, &stream).unwrap();
        assert!((p.last().unwrap() - 1.5).abs() < 1e-8);
    }

    #[test]
    fn ou_stationary_variance() {
        let c = coeffs("0", "-eta", "0", "1");
        let h = 0.01;
        let stream = NoiseStream::new(17, Channel::W, 0, h).unwrap();
        let p = simulate_frozen_fast_sde(0.0, 0.0, &c, 2000.0, h, &stream).unwrap();
        let tail = &p[1000..];
        let var = tail.iter().map(|e| e * e).sum::<f64>() / tail.len() as f64;
        // EM stationary variance h / (2h − h²) ≈ 0.5025; correlation time 1
        // leaves an MC error of about 0.5·sqrt(2/2000) ≈ 0.016
        assert!((var - 0.5).abs() < 0.06, "variance {var}");
    }

    #[test]
    fn bbar_of_eta_free_drift_is_exact() {
        let c = coeffs("cos(xi)", "-eta", "0", "1");
        let params = ErgodicParams { t_avg: 2.0, burn_in: 0.5, replicas: 4, step: 0.01 };
        let (v, se) = estimate_bbar(0.8, 0.0, &c, &params, 1).unwrap();
        assert!((v - 0.8f64.cos()).abs() < 1e-12);
        assert!(se < 1e-12);
    }

    #[test]
    fn bbar_ou_oracle() {
        let c = coeffs("sin(xi)+eta", "-eta", "0", "1");
        let params = ErgodicParams { t_avg: 50.0, burn_in: 1.0, replicas: 8, step: 0.02 };
        for xi in [0.0, 1.0] {
            let (v, se) = estimate_bbar(xi, 0.0, &c, &params, 5).unwrap();
            assert!((v - xi.sin()).abs() < 4.0 * se, "xi={xi}: {v} ± {se}");
        }
    }

    #[test]
    fn tabulated_interpolation_and_hull() {
        let d = AveragedDrift::tabulated(vec![-1.0, 0.0, 2.0], vec![1.0, 0.0, 4.0], vec![0.0; 3]).unwrap();
        assert_eq!(d.eval(-1.0).unwrap(), 1.0);
        assert_eq!(d.eval(-0.5).unwrap(), 0.5);
        assert_eq!(d.eval(1.0).unwrap(), 2.0);
        assert_eq!(d.eval(2.0).unwrap(), 4.0);
        assert!(matches!(d.eval(2.5), Err(Error::OutsideHull { .. })));
        assert!(AveragedDrift::tabulated(vec![0.0, 0.0], vec![0.0; 2], vec![0.0; 2]).is_err());
    }

    #[test]
    fn effective_xi_examples() {
        let stream = NoiseStream::new(2, Channel::W, 4, 0.001).unwrap();
        let zero = AveragedDrift::ClosedForm(Expr::zero());
        let p = integrate_effective_xi(0.4, &zero, &Expr::zero(), 1.0, 0.01, &stream).unwrap();
        assert!(p.iter().all(|x| *x == 0.4));

        let lin = AveragedDrift::ClosedForm(parse_expr("-xi").unwrap());
        let p = integrate_effective_xi(1.0, &lin, &Expr::zero(), 1.0, 0.001, &stream).unwrap();
        assert!((p.last().unwrap() - (-1.0f64).exp()).abs() < 1e-3);

        let one = parse_expr("1").unwrap();
        let p = integrate_effective_xi(0.0, &zero, &one, 1.0, 0.01, &stream).unwrap();
        let w = stream.coarse_increments(0, 100, 10).unwrap();
        let mut acc = 0.0;
        for dw in w {
            acc += dw;
        }
        assert_eq!(*p.last().unwrap(), acc);
    }
}
