//! Coefficient expression language, coefficient sets and the hypothesis
//! falsification checker.

mod coeffs;
mod expr;
mod hypotheses;
mod parser;

pub use coeffs::{allowed_vars, parse_restricted, CoefficientSet, CoefficientSpec, Constants, ModelKind};
pub use expr::{BinOp, Env, EvalError, Expr, Func, Var, VarSet};
pub use hypotheses::{check_hypotheses, HypothesisCheck, HypothesisReport, SamplingBox, Verdict, Witness};
pub use parser::{parse_expr, ParseError};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval(text: &str, env: Env) -> Result<f64, EvalError> {
        parse_expr(text).unwrap().eval(&env)
    }

    #[test]
    fn parses_sum_of_call_and_var() {
        let e = parse_expr("sin(xi)+eta").unwrap();
        assert_eq!(
            e,
            Expr::Bin(
                BinOp::Add,
                Box::new(Expr::Call(Func::Sin, vec![Expr::Var(Var::Xi)])),
                Box::new(Expr::Var(Var::Eta))
            )
        );
    }

    #[test]
    fn syntax_error_offset() {
        let err = parse_expr("v*(").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { offset: 3, .. }), "{err:?}");
        assert_eq!(parse_expr("1 + $").unwrap_err().offset(), 4);
        assert_eq!(parse_expr("(1 + 2").unwrap_err().offset(), 6);
    }

    #[test]
    fn unknown_identifiers_and_arity() {
        assert!(matches!(parse_expr("w + 1"), Err(ParseError::UnknownIdentifier { offset: 0, .. })));
        assert!(matches!(parse_expr("sqrt(u)"), Err(ParseError::UnknownIdentifier { .. })));
        assert!(matches!(
            parse_expr("min(u)"),
            Err(ParseError::Arity { expected: 2, found: 1, .. })
        ));
        assert!(matches!(parse_expr("clamp(u, 1)"), Err(ParseError::Arity { expected: 3, .. })));
    }

    #[test]
    fn precedence() {
        assert_eq!(eval("1+2*3", Env::new()).unwrap(), 7.0);
        assert_eq!(eval("-2^2", Env::new()).unwrap(), -4.0);
        assert_eq!(eval("2^3^2", Env::new()).unwrap(), 512.0);
        assert_eq!(eval("2^-1", Env::new()).unwrap(), 0.5);
        assert_eq!(eval("8/4/2", Env::new()).unwrap(), 1.0);
        assert_eq!(eval("1-2-3", Env::new()).unwrap(), -4.0);
        assert_eq!(eval("(1+2)*3", Env::new()).unwrap(), 9.0);
        assert_eq!(eval("1.5e1 + .5", Env::new()).unwrap(), 15.5);
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(eval("tanh(u)", Env::new().with(Var::U, 0.0)).unwrap(), 0.0);
        assert_eq!(eval("clamp(v,-1,1)", Env::new().with(Var::V, 5.0)).unwrap(), 1.0);
        assert_eq!(eval("xi^2", Env::new().with(Var::Xi, 3.0)).unwrap(), 9.0);
        assert_eq!(eval("max(u, 2) + min(u, 2) + abs(-u)", Env::new().with(Var::U, 1.0)).unwrap(), 4.0);
        assert!((eval("pi", Env::new()).unwrap() - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn evaluation_errors() {
        assert_eq!(eval("u + 1", Env::new()), Err(EvalError::Unbound("u")));
        assert!(matches!(eval("0^(-1)", Env::new()), Err(EvalError::Domain(_))));
        assert_eq!(eval("1/(u-u)", Env::new().with(Var::U, 2.0)), Err(EvalError::DivisionByZero));
        assert!(matches!(eval("(-2)^0.5", Env::new()), Err(EvalError::Domain(_))));
        assert!(matches!(eval("exp(1000)", Env::new()), Err(EvalError::Domain(_))));
        assert!(matches!(eval("clamp(u, 1, -1)", Env::new().with(Var::U, 0.0)), Err(EvalError::Domain(_))));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..100.0).prop_map(Expr::Num),
            prop::sample::select(Var::ALL.to_vec()).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 32, 3, |inner| {
            let bin = prop::sample::select(vec![BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow]);
            let func = prop::sample::select(vec![
                Func::Sin,
                Func::Cos,
                Func::Tanh,
                Func::Exp,
                Func::Abs,
                Func::Min,
                Func::Max,
                Func::Clamp,
            ]);
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (bin, inner.clone(), inner.clone()).prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (func, prop::collection::vec(inner, 3)).prop_map(|(f, mut args)| {
                    args.truncate(f.arity());
                    Expr::Call(f, args)
                }),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse_expr(&printed).unwrap();
            prop_assert_eq!(back, e);
        }
    }
}
