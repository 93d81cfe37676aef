//! Coefficient expressions: parsing, evaluation and exact symbolic derivatives.
//!
//! Every coefficient of an operator (diffusion entries, drift components,
//! coupling matrices), every Lyapunov candidate and every analytic test field
//! is an [`Expr`]. Operator assembly, the formal adjoint and the hypothesis
//! audit all differentiate through [`Expr::differentiate`], so there is a
//! single source of derivatives in the crate.
//!
//! Grammar (loosest to tightest binding):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?          right associative
//! primary := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! Variables are `x`, `y`, `z` or `x1`, `x2`, `x3` (also `x_1`, ...). The
//! exponent of `^` must not depend on the variables.

pub(crate) mod diff;
mod parse;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub use parse::parse;

/// Named real parameters bound at evaluation time.
pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("exponent at byte {offset} depends on a variable")]
    NonConstantExponent { offset: usize },
    #[error("empty expression")]
    Empty,
    #[error("parameter `{0}` is not bound")]
    UnboundParameter(String),
    #[error("variable x{} used but the point has dimension {dim}", index + 1)]
    VariableOutOfRange { index: usize, dim: usize },
    #[error("domain error: {function}({argument})")]
    Domain {
        function: &'static str,
        argument: f64,
    },
    #[error("non-finite value {value} while evaluating `{context}`")]
    NonFinite { value: f64, context: String },
    #[error("expression is not differentiable: {0}")]
    NotDifferentiable(String),
    #[error("real power of a base that is not provably positive: {0}")]
    NotProvablyPositive(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Sinh,
    Cosh,
    Sqrt,
    Abs,
}

impl UnaryOp {
    pub(crate) fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "exp" => UnaryOp::Exp,
            "log" | "ln" => UnaryOp::Log,
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "sinh" => UnaryOp::Sinh,
            "cosh" => UnaryOp::Cosh,
            "sqrt" => UnaryOp::Sqrt,
            "abs" => UnaryOp::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sinh => "sinh",
            UnaryOp::Cosh => "cosh",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
        }
    }

    fn apply(self, v: f64) -> Result<f64, ExprError> {
        let out = match self {
            UnaryOp::Neg => -v,
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => {
                if v <= 0.0 {
                    return Err(ExprError::Domain {
                        function: "log",
                        argument: v,
                    });
                }
                v.ln()
            }
            UnaryOp::Sin => v.sin(),
            UnaryOp::Cos => v.cos(),
            UnaryOp::Sinh => v.sinh(),
            UnaryOp::Cosh => v.cosh(),
            UnaryOp::Sqrt => {
                if v < 0.0 {
                    return Err(ExprError::Domain {
                        function: "sqrt",
                        argument: v,
                    });
                }
                v.sqrt()
            }
            UnaryOp::Abs => v.abs(),
        };
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }
}

/// Expression tree over the variables `x_1..x_d` and named parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Param(String),
    /// Zero-based variable index: `Var(0)` is `x_1`.
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

/// Names that may appear in an expression besides variables and functions.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    pub dim: usize,
    pub params: BTreeSet<String>,
}

impl Scope {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            params: BTreeSet::new(),
        }
    }

    pub fn with_params<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.params.extend(names.into_iter().map(Into::into));
        self
    }

    pub(crate) fn variable(&self, name: &str) -> Option<usize> {
        let idx = match name {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => {
                let digits = name
                    .strip_prefix("x_")
                    .or_else(|| name.strip_prefix('x'))?;
                let k: usize = digits.parse().ok()?;
                if k == 0 {
                    return None;
                }
                k - 1
            }
        };
        (idx < self.dim.max(1)).then_some(idx)
    }
}

impl Expr {
    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn var(index: usize) -> Self {
        Expr::Var(index)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Largest variable index referenced plus one (0 for variable-free trees).
    pub fn var_extent(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Param(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Unary(_, a) => a.var_extent(),
            Expr::Binary(_, a, b) => a.var_extent().max(b.var_extent()),
        }
    }

    pub fn depends_on_vars(&self) -> bool {
        self.var_extent() > 0
    }

    /// Parameter names referenced anywhere in the tree.
    pub fn params(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Param(p) => {
                out.insert(p.clone());
            }
            Expr::Unary(_, a) => a.collect_params(out),
            Expr::Binary(_, a, b) => {
                a.collect_params(out);
                b.collect_params(out);
            }
            Expr::Const(_) | Expr::Var(_) => {}
        }
    }

    /// IEEE-double evaluation at `point`; non-finite results are errors.
    pub fn eval(&self, point: &[f64], params: &Params) -> Result<f64, ExprError> {
        let v = self.eval_raw(point, params)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ExprError::NonFinite {
                value: v,
                context: self.to_string(),
            })
        }
    }

    fn eval_raw(&self, point: &[f64], params: &Params) -> Result<f64, ExprError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Param(p) => params
                .get(p)
                .copied()
                .ok_or_else(|| ExprError::UnboundParameter(p.clone())),
            Expr::Var(i) => point
                .get(*i)
                .copied()
                .ok_or(ExprError::VariableOutOfRange {
                    index: *i,
                    dim: point.len(),
                }),
            Expr::Unary(op, a) => op.apply(a.eval_raw(point, params)?),
            Expr::Binary(op, a, b) => {
                let l = a.eval_raw(point, params)?;
                let r = b.eval_raw(point, params)?;
                Ok(match op {
                    BinaryOp::Add => l + r,
                    BinaryOp::Sub => l - r,
                    BinaryOp::Mul => l * r,
                    BinaryOp::Div => l / r,
                    BinaryOp::Pow => power(l, r)?,
                })
            }
        }
    }

    /// Replaces every bound parameter by its value and folds constants.
    pub fn bind(&self, params: &Params) -> Expr {
        match self {
            Expr::Param(p) => match params.get(p) {
                Some(v) => Expr::Const(*v),
                None => self.clone(),
            },
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Unary(op, a) => diff::unary(*op, a.bind(params)),
            Expr::Binary(op, a, b) => diff::binary(*op, a.bind(params), b.bind(params)),
        }
    }

    /// Exact symbolic partial derivative with respect to `x_{var+1}`.
    pub fn differentiate(&self, var: usize) -> Result<Expr, ExprError> {
        diff::derivative(self, var)
    }

    /// Checks that every non-integer power has a base that is positive by
    /// construction (sums of squares plus positive constants, exponentials,
    /// `cosh`, ...).
    pub fn check_real_powers(&self, params: &Params) -> Result<(), ExprError> {
        match self {
            Expr::Const(_) | Expr::Param(_) | Expr::Var(_) => Ok(()),
            Expr::Unary(_, a) => a.check_real_powers(params),
            Expr::Binary(op, a, b) => {
                a.check_real_powers(params)?;
                b.check_real_powers(params)?;
                if *op == BinaryOp::Pow {
                    let e = b.eval(&[], params)?;
                    if e.fract() != 0.0 && sign_class(a, params) != Sign::Positive {
                        return Err(ExprError::NotProvablyPositive(a.to_string()));
                    }
                }
                Ok(())
            }
        }
    }
}

fn power(base: f64, exponent: f64) -> Result<f64, ExprError> {
    if exponent.fract() == 0.0 && exponent.abs() < i32::MAX as f64 {
        Ok(base.powi(exponent as i32))
    } else if base < 0.0 {
        Err(ExprError::Domain {
            function: "pow",
            argument: base,
        })
    } else {
        Ok(base.powf(exponent))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sign {
    Positive,
    NonNegative,
    Unknown,
}

fn sign_class(e: &Expr, params: &Params) -> Sign {
    use Sign::*;
    let of_value = |v: f64| {
        if v > 0.0 {
            Positive
        } else if v == 0.0 {
            NonNegative
        } else {
            Unknown
        }
    };
    match e {
        Expr::Const(c) => of_value(*c),
        Expr::Param(p) => params.get(p).map_or(Unknown, |v| of_value(*v)),
        Expr::Var(_) => Unknown,
        Expr::Unary(op, a) => match op {
            UnaryOp::Exp | UnaryOp::Cosh => Positive,
            UnaryOp::Abs => NonNegative,
            UnaryOp::Sqrt => match sign_class(a, params) {
                Positive => Positive,
                _ => NonNegative,
            },
            _ => Unknown,
        },
        Expr::Binary(op, a, b) => {
            let (sa, sb) = (sign_class(a, params), sign_class(b, params));
            match op {
                BinaryOp::Add => match (sa, sb) {
                    (Positive, Positive | NonNegative) | (NonNegative, Positive) => Positive,
                    (NonNegative, NonNegative) => NonNegative,
                    _ => Unknown,
                },
                BinaryOp::Mul => match (sa, sb) {
                    (Positive, Positive) => Positive,
                    (Positive | NonNegative, Positive | NonNegative) => NonNegative,
                    _ if a == b => NonNegative,
                    _ => Unknown,
                },
                BinaryOp::Div => match (sa, sb) {
                    (Positive, Positive) => Positive,
                    (NonNegative, Positive) => NonNegative,
                    _ => Unknown,
                },
                BinaryOp::Pow => {
                    if sa == Positive {
                        return Positive;
                    }
                    match b.eval(&[], params) {
                        Ok(k) if k.fract() == 0.0 && (k as i64) % 2 == 0 => NonNegative,
                        Ok(_) if sa == NonNegative => NonNegative,
                        _ => Unknown,
                    }
                }
                BinaryOp::Sub => Unknown,
            }
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesised so that re-parsing yields the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "(-{})", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Param(p) => f.write_str(p),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Unary(UnaryOp::Neg, a) => write!(f, "(-{a})"),
            Expr::Unary(op, a) => write!(f, "{}({a})", op.name()),
            Expr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scope() -> Scope {
        Scope::new(1).with_params(["b0"])
    }

    fn p(name: &str, v: f64) -> Params {
        [(name.to_string(), v)].into_iter().collect()
    }

    #[test]
    fn bare_variable() {
        assert_eq!(parse("x", &scope()).unwrap(), Expr::Var(0));
    }

    #[test]
    fn drift_of_polynomial_class() {
        let e = parse("-(b0)*x*(1+x^2)", &scope()).unwrap();
        assert_eq!(e.eval(&[1.0], &p("b0", 3.0)).unwrap(), -6.0);
    }

    #[test]
    fn gaussian_at_origin() {
        let e = parse("exp(-x^2/2)", &scope()).unwrap();
        assert_eq!(e.eval(&[0.0], &Params::new()).unwrap(), 1.0);
    }

    #[test]
    fn eval_examples() {
        let s = scope();
        assert_eq!(parse("1+x^2", &s).unwrap().eval(&[2.0], &Params::new()).unwrap(), 5.0);
        let e = parse("(1+x^2)^(-1)*exp(-b0*x^2/2)", &s).unwrap();
        assert_eq!(e.eval(&[0.0], &p("b0", 3.0)).unwrap(), 1.0);
        let c = parse("cos(x)", &s).unwrap();
        assert_eq!(c.eval(&[std::f64::consts::PI], &Params::new()).unwrap(), -1.0);
    }

    #[test]
    fn unary_minus_binds_looser_than_power() {
        let e = parse("-x^2", &scope()).unwrap();
        assert_eq!(e.eval(&[3.0], &Params::new()).unwrap(), -9.0);
        let r = parse("2^3^2", &scope()).unwrap();
        assert_eq!(r.eval(&[0.0], &Params::new()).unwrap(), 512.0);
    }

    #[test]
    fn unbound_and_domain_errors() {
        let e = parse("b0*x", &scope()).unwrap();
        assert_eq!(
            e.eval(&[1.0], &Params::new()),
            Err(ExprError::UnboundParameter("b0".into()))
        );
        let l = parse("log(x)", &scope()).unwrap();
        assert!(matches!(l.eval(&[-1.0], &Params::new()), Err(ExprError::Domain { .. })));
        let d = parse("1/x", &scope()).unwrap();
        assert!(matches!(d.eval(&[0.0], &Params::new()), Err(ExprError::NonFinite { .. })));
    }

    #[test]
    fn derivative_examples() {
        let s = scope();
        let sq = parse("x^2", &s).unwrap().differentiate(0).unwrap();
        assert_eq!(sq.eval(&[3.0], &Params::new()).unwrap(), 6.0);
        let g = parse("exp(-x^2/2)", &s).unwrap().differentiate(0).unwrap();
        let v = g.eval(&[1.0], &Params::new()).unwrap();
        assert!((v + (-0.5f64).exp()).abs() < 1e-15);
        let c = parse("7", &s).unwrap().differentiate(0).unwrap();
        assert!(c.is_zero());
    }

    #[test]
    fn abs_is_not_differentiable() {
        let e = parse("abs(x)", &scope()).unwrap();
        assert!(matches!(e.differentiate(0), Err(ExprError::NotDifferentiable(_))));
    }

    #[test]
    fn real_power_positivity() {
        let ok = parse("(1+x^2)^(b0/2)", &scope()).unwrap();
        ok.check_real_powers(&p("b0", 0.3)).unwrap();
        let bad = parse("x^0.5", &scope()).unwrap();
        assert!(bad.check_real_powers(&Params::new()).is_err());
        let int = parse("x^3", &scope()).unwrap();
        int.check_real_powers(&Params::new()).unwrap();
    }

    #[test]
    fn multi_dimensional_variables() {
        let s = Scope::new(2);
        let e = parse("x1*y + x_2", &s).unwrap();
        assert_eq!(e.eval(&[2.0, 3.0], &Params::new()).unwrap(), 9.0);
        assert!(parse("z", &s).is_err());
    }

    #[test]
    fn display_round_trips() {
        let s = scope();
        for src in [
            "-(b0)*x*(1+x^2)",
            "exp(-x^2/2)",
            "(1+x^2)^(-1)*exp(-b0*x^2/2)",
            "2^3^2 - -x",
            "sqrt(1+x^2)/cosh(x) - log(2+sin(x))",
            "1e-3*x + 0.1",
        ] {
            let a = parse(src, &s).unwrap();
            let b = parse(&a.to_string(), &s).unwrap();
            assert_eq!(a, b, "{src} -> {a}");
        }
    }
}
