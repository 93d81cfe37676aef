//! Symbolic differentiation. Simplification is limited to folding constant
//! subtrees and eliminating additive zeros and multiplicative ones, so the
//! derivative trees stay close to the textbook rules.

use super::{BinaryOp, Expr, ExprError, UnaryOp};

pub(crate) fn unary(op: UnaryOp, a: Expr) -> Expr {
    if let Expr::Const(c) = a {
        if let Ok(v) = op.apply(c) {
            if v.is_finite() {
                return Expr::Const(v);
            }
        }
    }
    if op == UnaryOp::Neg {
        if let Expr::Unary(UnaryOp::Neg, inner) = a {
            return *inner;
        }
    }
    Expr::Unary(op, Box::new(a))
}

pub(crate) fn binary(op: BinaryOp, a: Expr, b: Expr) -> Expr {
    match op {
        BinaryOp::Add => add(a, b),
        BinaryOp::Sub => sub(a, b),
        BinaryOp::Mul => mul(a, b),
        BinaryOp::Div => div(a, b),
        BinaryOp::Pow => pow(a, b),
    }
}

fn fold(op: BinaryOp, a: &Expr, b: &Expr) -> Option<Expr> {
    let (x, y) = (a.as_const()?, b.as_const()?);
    let v = match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
        BinaryOp::Div => x / y,
        BinaryOp::Pow => super::power(x, y).ok()?,
    };
    v.is_finite().then_some(Expr::Const(v))
}

pub(crate) fn add(a: Expr, b: Expr) -> Expr {
    if let Some(c) = fold(BinaryOp::Add, &a, &b) {
        return c;
    }
    if a.is_zero() {
        return b;
    }
    if b.is_zero() {
        return a;
    }
    Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b))
}

pub(crate) fn sub(a: Expr, b: Expr) -> Expr {
    if let Some(c) = fold(BinaryOp::Sub, &a, &b) {
        return c;
    }
    if b.is_zero() {
        return a;
    }
    if a.is_zero() {
        return neg(b);
    }
    Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b))
}

pub(crate) fn mul(a: Expr, b: Expr) -> Expr {
    if let Some(c) = fold(BinaryOp::Mul, &a, &b) {
        return c;
    }
    if a.is_zero() || b.is_zero() {
        return Expr::Const(0.0);
    }
    if a.is_one() {
        return b;
    }
    if b.is_one() {
        return a;
    }
    Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b))
}

pub(crate) fn div(a: Expr, b: Expr) -> Expr {
    if let Some(c) = fold(BinaryOp::Div, &a, &b) {
        return c;
    }
    if a.is_zero() {
        return Expr::Const(0.0);
    }
    if b.is_one() {
        return a;
    }
    Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b))
}

pub(crate) fn pow(a: Expr, b: Expr) -> Expr {
    if let Some(c) = fold(BinaryOp::Pow, &a, &b) {
        return c;
    }
    if b.is_zero() {
        return Expr::Const(1.0);
    }
    if b.is_one() {
        return a;
    }
    Expr::Binary(BinaryOp::Pow, Box::new(a), Box::new(b))
}

pub(crate) fn neg(a: Expr) -> Expr {
    unary(UnaryOp::Neg, a)
}

pub(crate) fn derivative(e: &Expr, var: usize) -> Result<Expr, ExprError> {
    Ok(match e {
        Expr::Const(_) | Expr::Param(_) => Expr::Const(0.0),
        Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
        Expr::Unary(op, a) => {
            let da = derivative(a, var)?;
            if da.is_zero() && *op != UnaryOp::Abs {
                return Ok(Expr::Const(0.0));
            }
            let a = (**a).clone();
            let outer = match op {
                UnaryOp::Neg => return Ok(neg(da)),
                UnaryOp::Exp => unary(UnaryOp::Exp, a),
                UnaryOp::Log => return Ok(div(da, a)),
                UnaryOp::Sin => unary(UnaryOp::Cos, a),
                UnaryOp::Cos => neg(unary(UnaryOp::Sin, a)),
                UnaryOp::Sinh => unary(UnaryOp::Cosh, a),
                UnaryOp::Cosh => unary(UnaryOp::Sinh, a),
                UnaryOp::Sqrt => {
                    return Ok(div(da, mul(Expr::Const(2.0), unary(UnaryOp::Sqrt, a))))
                }
                UnaryOp::Abs => {
                    if !a.depends_on_vars() {
                        return Ok(Expr::Const(0.0));
                    }
                    return Err(ExprError::NotDifferentiable(format!("abs({a})")));
                }
            };
            mul(outer, da)
        }
        Expr::Binary(op, a, b) => {
            let da = derivative(a, var)?;
            let db = derivative(b, var)?;
            let (a, b) = ((**a).clone(), (**b).clone());
            match op {
                BinaryOp::Add => add(da, db),
                BinaryOp::Sub => sub(da, db),
                BinaryOp::Mul => add(mul(da, b), mul(a, db)),
                BinaryOp::Div => {
                    if db.is_zero() {
                        div(da, b)
                    } else {
                        div(
                            sub(mul(da, b.clone()), mul(a, db)),
                            pow(b, Expr::Const(2.0)),
                        )
                    }
                }
                BinaryOp::Pow => {
                    if b.depends_on_vars() {
                        return Err(ExprError::NotDifferentiable(format!(
                            "variable exponent in ({a})^({b})"
                        )));
                    }
                    if da.is_zero() {
                        return Ok(Expr::Const(0.0));
                    }
                    let lowered = sub(b.clone(), Expr::Const(1.0));
                    mul(mul(b, pow(a, lowered)), da)
                }
            }
        }
    })
}
