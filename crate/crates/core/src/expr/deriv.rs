//! Symbolic differentiation with just enough constant folding to keep
//! derivative trees from filling up with `0 * ...` terms.

use super::{Expr, Func};

fn c(v: f64) -> Expr {
    Expr::Const(v)
}

fn is_const(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Const(x) if *x == v)
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(v) => c(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => c(x + y),
        (a, b) if is_const(&a, 0.0) => b,
        (a, b) if is_const(&b, 0.0) => a,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => c(x - y),
        (a, b) if is_const(&b, 0.0) => a,
        (a, b) if is_const(&a, 0.0) => neg(b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => c(x * y),
        (a, _) if is_const(&a, 0.0) => c(0.0),
        (_, b) if is_const(&b, 0.0) => c(0.0),
        (a, b) if is_const(&a, 1.0) => b,
        (a, b) if is_const(&b, 1.0) => a,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (a, _) if is_const(&a, 0.0) => c(0.0),
        (a, b) if is_const(&b, 1.0) => a,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (_, b) if is_const(&b, 0.0) => c(1.0),
        (a, b) if is_const(&b, 1.0) => a,
        (a, b) => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    Expr::Call(f, Box::new(a))
}

fn step(a: Expr) -> Expr {
    call(Func::Step, a)
}

pub(super) fn derivative(e: &Expr, var: usize) -> Expr {
    let d = |x: &Expr| derivative(x, var);
    match e {
        Expr::Const(_) => c(0.0),
        Expr::Var(i) => c(if *i == var { 1.0 } else { 0.0 }),
        Expr::Neg(a) => neg(d(a)),
        Expr::Add(a, b) => add(d(a), d(b)),
        Expr::Sub(a, b) => sub(d(a), d(b)),
        Expr::Mul(a, b) => add(
            mul(d(a), (**b).clone()),
            mul((**a).clone(), d(b)),
        ),
        Expr::Div(a, b) => div(
            sub(
                mul(d(a), (**b).clone()),
                mul((**a).clone(), d(b)),
            ),
            pow((**b).clone(), c(2.0)),
        ),
        Expr::Pow(a, b) => {
            let da = d(a);
            let db = d(b);
            match (b.as_ref(), is_const(&db, 0.0)) {
                (Expr::Const(k), _) => mul(mul(c(*k), pow((**a).clone(), c(k - 1.0))), da),
                (_, true) => mul(
                    mul((**b).clone(), pow((**a).clone(), sub((**b).clone(), c(1.0)))),
                    da,
                ),
                _ => {
                    // d(u^v) = u^v (v' ln u + v u'/u)
                    let ln_u = call(Func::Log, (**a).clone());
                    mul(
                        e.clone(),
                        add(
                            mul(db, ln_u),
                            div(mul((**b).clone(), da), (**a).clone()),
                        ),
                    )
                }
            }
        }
        Expr::Call(f, a) => {
            let da = d(a);
            if is_const(&da, 0.0) {
                return c(0.0);
            }
            let u = (**a).clone();
            let outer = match f {
                Func::Sin => call(Func::Cos, u),
                Func::Cos => neg(call(Func::Sin, u)),
                Func::Exp => call(Func::Exp, u),
                Func::Log => return div(da, u),
                Func::Sqrt => return div(da, mul(c(2.0), call(Func::Sqrt, u))),
                // Left branch at the kink: d|u| = -1 at u = 0.
                Func::Abs => sub(mul(c(2.0), step(u)), c(1.0)),
                Func::Tanh => sub(c(1.0), pow(call(Func::Tanh, u), c(2.0))),
                Func::Step => return c(0.0),
            };
            mul(outer, da)
        }
        // Ties pick the first argument's derivative.
        Expr::Min(a, b) => {
            let (da, db) = (d(a), d(b));
            add(
                da.clone(),
                mul(step(sub((**a).clone(), (**b).clone())), sub(db, da)),
            )
        }
        Expr::Max(a, b) => {
            let (da, db) = (d(a), d(b));
            add(
                da.clone(),
                mul(step(sub((**b).clone(), (**a).clone())), sub(db, da)),
            )
        }
    }
}
