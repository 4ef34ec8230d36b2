use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    U,
    V,
    Xi,
    Eta,
    X,
}

impl Var {
    pub const ALL: [Var; 5] = [Var::U, Var::V, Var::Xi, Var::Eta, Var::X];

    pub fn name(self) -> &'static str {
        match self {
            Var::U => "u",
            Var::V => "v",
            Var::Xi => "xi",
            Var::Eta => "eta",
            Var::X => "x",
        }
    }

    pub fn from_name(name: &str) -> Option<Var> {
        Var::ALL.into_iter().find(|v| v.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn bit(self) -> u8 {
        1 << self.index()
    }
}

/// Set of variables as a bit mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VarSet(pub u8);

impl VarSet {
    pub fn of(vars: &[Var]) -> VarSet {
        VarSet(vars.iter().fold(0, |m, v| m | v.bit()))
    }

    pub fn contains(self, v: Var) -> bool {
        self.0 & v.bit() != 0
    }

    pub fn is_subset(self, other: VarSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn vars(self) -> Vec<Var> {
        Var::ALL.into_iter().filter(|v| self.contains(*v)).collect()
    }
}

impl fmt::Display for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.vars().iter().map(|v| v.name()).collect();
        write!(f, "{{{}}}", names.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
    Abs,
    Min,
    Max,
    Clamp,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "abs" => Func::Abs,
            "min" => Func::Min,
            "max" => Func::Max,
            "clamp" => Func::Clamp,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
            Func::Clamp => "clamp",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::Clamp => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(&'static str),
    #[error("division by zero")]
    DivisionByZero,
    #[error("domain error: {0}")]
    Domain(String),
}

/// Variable bindings for evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Env {
    values: [f64; 5],
    bound: VarSet,
}

impl Env {
    pub fn new() -> Self {
        Env::default()
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.set(var, value);
        self
    }

    pub fn set(&mut self, var: Var, value: f64) {
        self.values[var.index()] = value;
        self.bound.0 |= var.bit();
    }

    pub fn get(&self, var: Var) -> Option<f64> {
        self.bound.contains(var).then(|| self.values[var.index()])
    }

    pub fn bound(&self) -> VarSet {
        self.bound
    }
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Num(0.0)
    }

    pub fn vars(&self) -> VarSet {
        match self {
            Expr::Num(_) => VarSet(0),
            Expr::Var(v) => VarSet(v.bit()),
            Expr::Neg(e) => e.vars(),
            Expr::Bin(_, a, b) => VarSet(a.vars().0 | b.vars().0),
            Expr::Call(_, args) => VarSet(args.iter().fold(0, |m, a| m | a.vars().0)),
        }
    }

    pub fn depends_on(&self, v: Var) -> bool {
        self.vars().contains(v)
    }

    pub fn is_zero_constant(&self) -> bool {
        matches!(self, Expr::Num(c) if *c == 0.0)
    }

    pub fn eval(&self, env: &Env) -> Result<f64, EvalError> {
        let missing = VarSet(self.vars().0 & !env.bound.0);
        if let Some(v) = missing.vars().first() {
            return Err(EvalError::Unbound(v.name()));
        }
        self.eval_raw(&env.values)
    }

    /// Evaluation without the binding check; unbound slots read as whatever
    /// value the array holds.
    pub(crate) fn eval_raw(&self, vals: &[f64; 5]) -> Result<f64, EvalError> {
        let r = match self {
            Expr::Num(c) => *c,
            Expr::Var(v) => vals[v.index()],
            Expr::Neg(e) => -e.eval_raw(vals)?,
            Expr::Bin(op, a, b) => {
                let x = a.eval_raw(vals)?;
                let y = b.eval_raw(vals)?;
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(EvalError::DivisionByZero);
                        }
                        x / y
                    }
                    BinOp::Pow => pow(x, y)?,
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval_raw(vals)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tanh => a.tanh(),
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval_raw(vals)?),
                    Func::Max => a.max(args[1].eval_raw(vals)?),
                    Func::Clamp => {
                        let lo = args[1].eval_raw(vals)?;
                        let hi = args[2].eval_raw(vals)?;
                        if lo > hi {
                            return Err(EvalError::Domain(format!("clamp bounds {lo} > {hi}")));
                        }
                        a.clamp(lo, hi)
                    }
                }
            }
        };
        if !r.is_finite() {
            return Err(EvalError::Domain(format!("non-finite result in `{self}`")));
        }
        Ok(r)
    }
}

fn pow(x: f64, y: f64) -> Result<f64, EvalError> {
    if x == 0.0 && y < 0.0 {
        return Err(EvalError::Domain(format!("0 raised to negative power {y}")));
    }
    if x < 0.0 && y.fract() != 0.0 {
        return Err(EvalError::Domain(format!("negative base {x} with non-integer exponent {y}")));
    }
    if y.fract() == 0.0 && y.abs() <= i32::MAX as f64 {
        return Ok(x.powi(y as i32));
    }
    Ok(x.powf(y))
}

// Fully parenthesized so that printing and reparsing give back the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(c) => write!(f, "{c:?}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}
