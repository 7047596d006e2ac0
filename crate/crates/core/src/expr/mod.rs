//! Expression trees for vector fields, certificates and set-defining functions.
//!
//! Expressions are parsed from infix text over an ordered list of variable
//! names, evaluated in `f64`, and differentiated symbolically. Parsed trees are
//! immutable, so fields can be shared freely across rayon workers.

mod deriv;
mod parser;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use parser::ParseError;

/// Built-in unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    /// Heaviside step with `step(0) = 0`. Appears in gradients of the
    /// non-smooth primitives.
    Step,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Step => "step",
        }
    }

    pub(crate) fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "tanh" => Func::Tanh,
            "step" => Func::Step,
            _ => return None,
        })
    }
}

/// Abstract syntax tree. Variables are referenced by position in the owning
/// field's variable list.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
}

/// Kinds of evaluation failure detected by [`Expr::try_eval`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainErrorKind {
    DivisionByZero,
    LogNonPositive,
    SqrtNegative,
    FractionalPowerOfNegative,
}

impl fmt::Display for DomainErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainErrorKind::DivisionByZero => "division by zero",
            DomainErrorKind::LogNonPositive => "log of non-positive value",
            DomainErrorKind::SqrtNegative => "sqrt of negative value",
            DomainErrorKind::FractionalPowerOfNegative => "fractional power of negative value",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("dimension mismatch: field has {expected} variables, point has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{kind} in `{subexpr}`")]
    Domain {
        kind: DomainErrorKind,
        subexpr: String,
    },
    #[error("variable index {index} out of range for {dim} variables")]
    UnboundVariable { index: usize, dim: usize },
    #[error("non-smooth primitive (abs/min/max/step) in `{0}`; certificates must be smooth")]
    NonSmooth(String),
    #[error("vector field components must share one variable list")]
    MixedVariables,
}

const POWI_LIMIT: f64 = 64.0;

fn integer_exponent(e: f64) -> Option<i32> {
    (e.fract() == 0.0 && e.abs() <= POWI_LIMIT).then_some(e as i32)
}

impl Expr {
    /// Evaluates with IEEE semantics: domain violations produce NaN or inf
    /// instead of an error. This is the hot path used by the integrators.
    pub fn eval_raw(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval_raw(x),
            Expr::Add(a, b) => a.eval_raw(x) + b.eval_raw(x),
            Expr::Sub(a, b) => a.eval_raw(x) - b.eval_raw(x),
            Expr::Mul(a, b) => a.eval_raw(x) * b.eval_raw(x),
            Expr::Div(a, b) => a.eval_raw(x) / b.eval_raw(x),
            Expr::Pow(a, b) => {
                let base = a.eval_raw(x);
                let exp = b.eval_raw(x);
                match integer_exponent(exp) {
                    Some(n) => base.powi(n),
                    None => base.powf(exp),
                }
            }
            Expr::Call(f, a) => apply(*f, a.eval_raw(x)),
            Expr::Min(a, b) => a.eval_raw(x).min(b.eval_raw(x)),
            Expr::Max(a, b) => a.eval_raw(x).max(b.eval_raw(x)),
        }
    }

    /// Evaluates with domain checking. On failure returns the offending
    /// subexpression.
    pub fn try_eval(&self, x: &[f64]) -> Result<f64, (DomainErrorKind, &Expr)> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.try_eval(x)?,
            Expr::Add(a, b) => a.try_eval(x)? + b.try_eval(x)?,
            Expr::Sub(a, b) => a.try_eval(x)? - b.try_eval(x)?,
            Expr::Mul(a, b) => a.try_eval(x)? * b.try_eval(x)?,
            Expr::Div(a, b) => {
                let num = a.try_eval(x)?;
                let den = b.try_eval(x)?;
                if den == 0.0 {
                    return Err((DomainErrorKind::DivisionByZero, self));
                }
                num / den
            }
            Expr::Pow(a, b) => {
                let base = a.try_eval(x)?;
                let exp = b.try_eval(x)?;
                match integer_exponent(exp) {
                    Some(n) => {
                        if base == 0.0 && n < 0 {
                            return Err((DomainErrorKind::DivisionByZero, self));
                        }
                        base.powi(n)
                    }
                    None => {
                        if base < 0.0 && exp.fract() != 0.0 {
                            return Err((DomainErrorKind::FractionalPowerOfNegative, self));
                        }
                        if base == 0.0 && exp < 0.0 {
                            return Err((DomainErrorKind::DivisionByZero, self));
                        }
                        base.powf(exp)
                    }
                }
            }
            Expr::Call(f, a) => {
                let v = a.try_eval(x)?;
                match f {
                    Func::Log if v <= 0.0 => return Err((DomainErrorKind::LogNonPositive, self)),
                    Func::Sqrt if v < 0.0 => return Err((DomainErrorKind::SqrtNegative, self)),
                    _ => apply(*f, v),
                }
            }
            Expr::Min(a, b) => a.try_eval(x)?.min(b.try_eval(x)?),
            Expr::Max(a, b) => a.try_eval(x)?.max(b.try_eval(x)?),
        })
    }

    /// False if the tree contains `abs`, `min`, `max` or `step`.
    pub fn is_smooth(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => true,
            Expr::Neg(a) => a.is_smooth(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.is_smooth() && b.is_smooth(),
            Expr::Call(Func::Abs | Func::Step, _) => false,
            Expr::Call(_, a) => a.is_smooth(),
            Expr::Min(_, _) | Expr::Max(_, _) => false,
        }
    }

    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Neg(a) | Expr::Call(_, a) => a.max_var(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.max_var().max(b.max_var()),
        }
    }

    /// Symbolic partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Expr {
        deriv::derivative(self, var)
    }

    pub fn display<'a>(&'a self, vars: &'a [String]) -> ExprDisplay<'a> {
        ExprDisplay { expr: self, vars }
    }
}

fn apply(f: Func, v: f64) -> f64 {
    match f {
        Func::Sin => v.sin(),
        Func::Cos => v.cos(),
        Func::Exp => v.exp(),
        Func::Log => v.ln(),
        Func::Sqrt => v.sqrt(),
        Func::Abs => v.abs(),
        Func::Tanh => v.tanh(),
        Func::Step => {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Fully parenthesized printer; its output parses back to an expression that
/// evaluates bit-identically.
pub struct ExprDisplay<'a> {
    expr: &'a Expr,
    vars: &'a [String],
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vars = self.vars;
        fn sub<'b>(expr: &'b Expr, vars: &'b [String]) -> ExprDisplay<'b> {
            ExprDisplay { expr, vars }
        }
        let sub = |e| sub(e, vars);
        match self.expr {
            Expr::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => {
                write!(f, "(-{:?})", -c)
            }
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(i) => match self.vars.get(*i) {
                Some(name) => f.write_str(name),
                None => write!(f, "_{i}"),
            },
            Expr::Neg(a) => write!(f, "(-{})", sub(a)),
            Expr::Add(a, b) => write!(f, "({} + {})", sub(a), sub(b)),
            Expr::Sub(a, b) => write!(f, "({} - {})", sub(a), sub(b)),
            Expr::Mul(a, b) => write!(f, "({} * {})", sub(a), sub(b)),
            Expr::Div(a, b) => write!(f, "({} / {})", sub(a), sub(b)),
            Expr::Pow(a, b) => write!(f, "({} ^ {})", sub(a), sub(b)),
            Expr::Call(func, a) => write!(f, "{}({})", func.name(), sub(a)),
            Expr::Min(a, b) => write!(f, "min({}, {})", sub(a), sub(b)),
            Expr::Max(a, b) => write!(f, "max({}, {})", sub(a), sub(b)),
        }
    }
}

/// Parses `source` over the ordered variable names.
pub fn parse(source: &str, vars: &[String]) -> Result<Expr, ParseError> {
    parser::parse(source, vars)
}

/// A scalar function of `dim` named variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    expr: Expr,
    vars: Arc<[String]>,
}

impl ScalarField {
    pub fn parse<S: AsRef<str>>(source: &str, vars: &[S]) -> Result<Self, ExprError> {
        let vars: Arc<[String]> = vars.iter().map(|v| v.as_ref().to_string()).collect();
        let expr = parser::parse(source, &vars)?;
        Ok(Self { expr, vars })
    }

    pub fn from_expr(expr: Expr, vars: Arc<[String]>) -> Result<Self, ExprError> {
        if let Some(i) = expr.max_var() {
            if i >= vars.len() {
                return Err(ExprError::UnboundVariable {
                    index: i,
                    dim: vars.len(),
                });
            }
        }
        Ok(Self { expr, vars })
    }

    pub fn constant(value: f64, vars: Arc<[String]>) -> Self {
        Self {
            expr: Expr::Const(value),
            vars,
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn vars(&self) -> &Arc<[String]> {
        &self.vars
    }

    pub fn dim(&self) -> usize {
        self.vars.len()
    }

    pub fn is_smooth(&self) -> bool {
        self.expr.is_smooth()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, ExprError> {
        self.check_dim(x)?;
        self.expr.try_eval(x).map_err(|(kind, sub)| ExprError::Domain {
            kind,
            subexpr: sub.display(&self.vars).to_string(),
        })
    }

    /// Unchecked evaluation (IEEE semantics, no dimension check beyond
    /// indexing).
    #[inline]
    pub fn eval_raw(&self, x: &[f64]) -> f64 {
        self.expr.eval_raw(x)
    }

    pub fn grad(&self) -> VectorField {
        let components = (0..self.dim())
            .map(|i| ScalarField {
                expr: self.expr.derivative(i),
                vars: self.vars.clone(),
            })
            .collect();
        VectorField {
            components,
            vars: self.vars.clone(),
        }
    }

    /// Gradient for certificate use: rejects non-smooth primitives.
    pub fn smooth_grad(&self) -> Result<VectorField, ExprError> {
        if !self.is_smooth() {
            return Err(ExprError::NonSmooth(self.to_string()));
        }
        Ok(self.grad())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ExprError> {
        if x.len() != self.dim() {
            return Err(ExprError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.display(&self.vars).fmt(f)
    }
}

/// `n` scalar components over a shared list of `n` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    components: Vec<ScalarField>,
    vars: Arc<[String]>,
}

impl VectorField {
    pub fn parse<S: AsRef<str>, V: AsRef<str>>(
        sources: &[S],
        vars: &[V],
    ) -> Result<Self, ExprError> {
        let vars: Arc<[String]> = vars.iter().map(|v| v.as_ref().to_string()).collect();
        let components = sources
            .iter()
            .map(|s| {
                Ok(ScalarField {
                    expr: parser::parse(s.as_ref(), &vars)?,
                    vars: vars.clone(),
                })
            })
            .collect::<Result<Vec<_>, ExprError>>()?;
        Ok(Self { components, vars })
    }

    pub fn from_components(components: Vec<ScalarField>) -> Result<Self, ExprError> {
        let vars = match components.first() {
            Some(c) => c.vars.clone(),
            None => Arc::from(Vec::<String>::new()),
        };
        if components.iter().any(|c| c.vars != vars) {
            return Err(ExprError::MixedVariables);
        }
        Ok(Self { components, vars })
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }

    pub fn vars(&self) -> &Arc<[String]> {
        &self.vars
    }

    /// Number of variables.
    pub fn dim(&self) -> usize {
        self.vars.len()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.eval_raw(x);
        }
    }

    /// Row-major Jacobian fields `d f_i / d x_j`.
    pub fn jacobian(&self) -> Vec<VectorField> {
        self.components.iter().map(ScalarField::grad).collect()
    }
}

impl fmt::Display for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, c) in self.components.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            c.fmt(f)?;
        }
        f.write_str("]")
    }
}

/// Default variable names: `x` in one dimension, `x1..xn` otherwise.
pub fn default_vars(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec!["x".to_string()]
    } else {
        (1..=dim).map(|i| format!("x{i}")).collect()
    }
}
