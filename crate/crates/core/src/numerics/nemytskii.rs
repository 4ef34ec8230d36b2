//! Pointwise (Nemytskii) application of coefficient expressions to fields.

use super::basis::{EigenBasis, Field};
use crate::dsl::{Expr, Var};
use crate::error::{Error, Result};

/// Arguments of a pointwise map: grid values of `u` and `v` where present,
/// scalars `ξ` and `η`. `x` is always bound to the grid abscissa.
#[derive(Clone, Copy, Debug, Default)]
pub struct GridArgs<'a> {
    pub u: Option<&'a [f64]>,
    pub v: Option<&'a [f64]>,
    pub xi: Option<f64>,
    pub eta: Option<f64>,
}

/// Evaluate `expr` at every grid point.
pub fn eval_on_grid(basis: &EigenBasis, expr: &Expr, args: &GridArgs<'_>) -> Result<Vec<f64>> {
    let grid = basis.grid();
    let m = grid.len();
    for (name, g) in [("u", args.u), ("v", args.v)] {
        if let Some(g) = g {
            if g.len() != m {
                return Err(Error::InvalidArgument(format!(
                    "{name} has {} grid values, basis has {m}",
                    g.len()
                )));
            }
        }
    }
    let needed = expr.vars();
    let bound = [
        (Var::U, args.u.is_some()),
        (Var::V, args.v.is_some()),
        (Var::Xi, args.xi.is_some()),
        (Var::Eta, args.eta.is_some()),
    ];
    for (var, present) in bound {
        if needed.contains(var) && !present {
            return Err(Error::Eval(crate::dsl::EvalError::Unbound(var.name())));
        }
    }
    let mut vals = [0.0; 5];
    vals[2] = args.xi.unwrap_or(0.0);
    vals[3] = args.eta.unwrap_or(0.0);
    let mut out = Vec::with_capacity(m);
    for (j, &x) in grid.iter().enumerate() {
        vals[0] = args.u.map_or(0.0, |g| g[j]);
        vals[1] = args.v.map_or(0.0, |g| g[j]);
        vals[4] = x;
        let r = expr
            .eval_raw(&vals)
            .map_err(|source| Error::GridEval { expr: expr.to_string(), index: j, x, source })?;
        out.push(r);
    }
    Ok(out)
}

/// `x ↦ expr(u(x), v(x), ξ, η, x)` projected back onto the basis.
pub fn nemytskii_apply(
    basis: &EigenBasis,
    expr: &Expr,
    u: Option<&Field>,
    v: Option<&Field>,
    xi: Option<f64>,
    eta: Option<f64>,
) -> Result<Field> {
    if expr.is_zero_constant() {
        return Ok(basis.zeros());
    }
    let ug = u.map(|f| basis.synthesize(f)).transpose()?;
    let vg = v.map(|f| basis.synthesize(f)).transpose()?;
    let args = GridArgs { u: ug.as_deref(), v: vg.as_deref(), xi, eta };
    basis.project(&eval_on_grid(basis, expr, &args)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_expr;

    fn basis() -> EigenBasis {
        EigenBasis::new(8, 17).unwrap()
    }

    #[test]
    fn zero_expression_gives_zero_field() {
        let b = basis();
        let out = nemytskii_apply(&b, &parse_expr("0").unwrap(), None, None, None, None).unwrap();
        assert_eq!(out, b.zeros());
    }

    #[test]
    fn identity_reproduces_field() {
        let b = basis();
        let u = Field::from_coeffs((1..=8).map(|k| 1.0 / k as f64).collect());
        let out = nemytskii_apply(&b, &parse_expr("u").unwrap(), Some(&u), None, None, None).unwrap();
        for (a, c) in out.coeffs().iter().zip(u.coeffs()) {
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn sine_of_zero_field() {
        let b = basis();
        let out = nemytskii_apply(&b, &parse_expr("sin(u)").unwrap(), Some(&b.zeros()), None, None, None).unwrap();
        assert!(out.coeffs().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn scalar_and_position_arguments() {
        let b = basis();
        // xi * sin(pi x) = (xi / √2) e_1
        let out = nemytskii_apply(&b, &parse_expr("xi*sin(pi*x)").unwrap(), None, None, Some(3.0), None).unwrap();
        assert!((out.coeffs()[0] - 3.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(out.coeffs()[1..].iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn evaluation_error_reports_grid_location() {
        let b = basis();
        let err = nemytskii_apply(&b, &parse_expr("1/(x-0.5)").unwrap(), None, None, None, None).unwrap_err();
        match err {
            Error::GridEval { index, x, .. } => {
                assert_eq!(index, 8);
                assert!((x - 0.5).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_argument_is_reported() {
        let b = basis();
        let err = nemytskii_apply(&b, &parse_expr("v").unwrap(), Some(&b.zeros()), None, None, None).unwrap_err();
        assert!(err.to_string().contains("`v`"), "{err}");
    }
}
