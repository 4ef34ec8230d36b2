//! Dirichlet sine eigenbasis of L²(0, 1).
//!
//! A [`Field`] is stored by its coefficients on `e_k(x) = √2 sin(kπx)`,
//! `k = 1..N`. Point values live on the uniform interior grid
//! `x_j = j / (M + 1)`, `j = 1..M`, where the discrete sine transform with
//! weight `1 / (M + 1)` is exactly orthonormal for every `k ≤ M`.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    coeffs: Vec<f64>,
}

impl Field {
    pub fn zeros(n_modes: usize) -> Self {
        Field { coeffs: vec![0.0; n_modes] }
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        Field { coeffs }
    }

    /// The basis function `e_k` (1-based mode index).
    pub fn mode(n_modes: usize, k: usize) -> Self {
        let mut f = Field::zeros(n_modes);
        f.coeffs[k - 1] = 1.0;
        f
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field { coeffs: self.coeffs.iter().map(|c| a * c).collect() }
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Field) -> Result<()> {
        check_same(self, other)?;
        for (s, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        check_same(self, other)?;
        Ok(Field {
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn distance_sq(&self, other: &Field) -> Result<f64> {
        check_same(self, other)?;
        Ok(self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

fn check_same(a: &Field, b: &Field) -> Result<()> {
    if a.coeffs.len() != b.coeffs.len() {
        return Err(Error::BasisMismatch { left: a.coeffs.len(), right: b.coeffs.len() });
    }
    Ok(())
}

/// `(a, b)_H = Σ a_k b_k`
pub fn l2_inner(a: &Field, b: &Field) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.coeffs.iter().zip(&b.coeffs).map(|(x, y)| x * y).sum())
}

#[derive(Clone, Debug)]
pub struct EigenBasis {
    n_modes: usize,
    eigenvalues: Vec<f64>,
    grid: Vec<f64>,
    /// Row-major `n_modes × grid_points` table of `e_k(x_j)`.
    table: Vec<f64>,
    weight: f64,
}

impl EigenBasis {
    pub fn new(n_modes: usize, grid_points: usize) -> Result<Self> {
        if n_modes < 1 {
            return Err(Error::InvalidArgument("n_modes must be at least 1".into()));
        }
        if grid_points < 2 * n_modes + 1 {
            return Err(Error::InvalidArgument(format!(
                "grid_points = {grid_points} is below 2·n_modes + 1 = {}",
                2 * n_modes + 1
            )));
        }
        let m1 = (grid_points + 1) as f64;
        let grid: Vec<f64> = (1..=grid_points).map(|j| j as f64 / m1).collect();
        let eigenvalues = (1..=n_modes).map(|k| (k as f64 * PI).powi(2)).collect();
        let mut table = Vec::with_capacity(n_modes * grid_points);
        for k in 1..=n_modes {
            for j in 1..=grid_points {
                // integer reduction keeps the argument exact before scaling by π
                let r = (k * j) % (2 * (grid_points + 1));
                table.push(SQRT_2 * (PI * r as f64 / m1).sin());
            }
        }
        Ok(EigenBasis { n_modes, eigenvalues, grid, table, weight: 1.0 / m1 })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn grid_points(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda1(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn quadrature_weight(&self) -> f64 {
        self.weight
    }

    /// `e_k(x_j)` with 1-based `k` and 0-based grid index.
    pub fn eval_mode(&self, k: usize, j: usize) -> f64 {
        self.table[(k - 1) * self.grid.len() + j]
    }

    pub fn zeros(&self) -> Field {
        Field::zeros(self.n_modes)
    }

    pub fn check(&self, field: &Field) -> Result<()> {
        if field.n_modes() != self.n_modes {
            return Err(Error::BasisMismatch { left: field.n_modes(), right: self.n_modes });
        }
        Ok(())
    }

    /// Point values of `field` on the quadrature grid.
    pub fn synthesize(&self, field: &Field) -> Result<Vec<f64>> {
        self.check(field)?;
        let m = self.grid.len();
        let mut out = vec![0.0; m];
        for (k, &c) in field.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = &self.table[k * m..(k + 1) * m];
            for (o, s) in out.iter_mut().zip(row) {
                *o += c * s;
            }
        }
        Ok(out)
    }

    /// Discrete sine transform of grid values onto the first `n_modes` modes.
    pub fn project(&self, values: &[f64]) -> Result<Field> {
        let m = self.grid.len();
        if values.len() != m {
            return Err(Error::InvalidArgument(format!(
                "expected {m} grid values, got {}",
                values.len()
            )));
        }
        let coeffs = (0..self.n_modes)
            .map(|k| {
                let row = &self.table[k * m..(k + 1) * m];
                self.weight * row.iter().zip(values).map(|(s, v)| s * v).sum::<f64>()
            })
            .collect();
        Ok(Field { coeffs })
    }

    /// Quadrature L² norm of grid values.
    pub fn grid_norm_sq(&self, values: &[f64]) -> f64 {
        self.weight * values.iter().map(|v| v * v).sum::<f64>()
    }

    /// Heat semigroup `G_t`: `c_k ↦ c_k e^{-λ_k t}`.
    pub fn semigroup(&self, field: &Field, t: f64) -> Result<Field> {
        let mut out = field.clone();
        self.semigroup_in_place(&mut out, t)?;
        Ok(out)
    }

    pub fn semigroup_in_place(&self, field: &mut Field, t: f64) -> Result<()> {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("semigroup time must be >= 0, got {t}")));
        }
        self.check(field)?;
        for (c, l) in field.coeffs.iter_mut().zip(&self.eigenvalues) {
            *c *= (-l * t).exp();
        }
        Ok(())
    }

    /// Per-mode factors `e^{-λ_k t}` and `φ₁ = (1 - e^{-λ_k t}) / λ_k`.
    ///
    /// `φ₁` is the exact weight of `∫_0^t G_{t-s} F ds` for `F` held constant.
    pub fn step_factors(&self, t: f64) -> StepFactors {
        self.shifted_step_factors(t, 0.0)
    }

    /// Step factors of `Δ + c` (rates `λ_k − c`), for a linear term `c v`
    /// moved out of the Nemytskii drift into the exactly integrated part.
    pub fn shifted_step_factors(&self, t: f64, c: f64) -> StepFactors {
        let rates = self.eigenvalues.iter().map(|l| l - c);
        let decay = rates.clone().map(|r| (-r * t).exp()).collect();
        let phi1 = rates.map(|r| if r == 0.0 { t } else { -(-r * t).exp_m1() / r }).collect();
        StepFactors { t, decay, phi1 }
    }

    /// Field from point values of a function on the grid.
    pub fn project_fn(&self, f: impl Fn(f64) -> f64) -> Field {
        let values: Vec<f64> = self.grid.iter().map(|&x| f(x)).collect();
        self.project(&values).expect("grid length matches")
    }

    /// Σ λ_k c_k², the discrete ‖∇v‖².
    pub fn dirichlet_energy(&self, field: &Field) -> Result<f64> {
        self.check(field)?;
        Ok(field.coeffs.iter().zip(&self.eigenvalues).map(|(c, l)| l * c * c).sum())
    }
}

#[derive(Clone, Debug)]
pub struct StepFactors {
    pub t: f64,
    pub decay: Vec<f64>,
    pub phi1: Vec<f64>,
}

impl StepFactors {
    /// `G_t base + φ₁ drift + G_t noise · dw`
    pub fn advance(&self, base: &Field, drift: &Field, noise: Option<(&Field, f64)>) -> Field {
        let mut out = Vec::with_capacity(base.coeffs.len());
        for k in 0..base.coeffs.len() {
            let mut c = base.coeffs[k];
            if let Some((s, dw)) = noise {
                c += s.coeffs[k] * dw;
            }
            out.push(self.decay[k] * c + self.phi1[k] * drift.coeffs[k]);
        }
        Field { coeffs: out }
    }
}
