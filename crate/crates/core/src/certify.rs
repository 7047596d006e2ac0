//! Lyapunov-barrier certificate checks under worst-case disturbances.
//!
//! The supremum of `∇V·(f + d)` over `|d| <= δ` is `∇V·f + δ|∇V|`, so the
//! disturbance quantifier is handled in closed form and only the state is
//! sampled on a grid.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::PerturbedSystem;
use crate::expr::{Expr, ExprError, ScalarField, VectorField};
use crate::geometry::{Grid, ProperIndicator, SetSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("certificate is missing `{0}`")]
    Missing(&'static str),
    #[error("certificate dimension {got} does not match the system ({expected})")]
    Dimension { expected: usize, got: usize },
    #[error("A and U intersect")]
    TargetMeetsUnsafe,
    #[error("{0} has no grid points")]
    NoGridPoints(&'static str),
    #[error("monotone function: {0}")]
    BadMonotone(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Piecewise-linear class-K surrogate through `(0, 0)` with strictly
/// increasing values and linear extrapolation past the last breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneFn {
    breakpoints: Vec<(f64, f64)>,
}

impl MonotoneFn {
    pub fn new(mut breakpoints: Vec<(f64, f64)>) -> Result<Self, CertifyError> {
        if breakpoints.first().map(|b| b.0) != Some(0.0) {
            breakpoints.insert(0, (0.0, 0.0));
        }
        if breakpoints[0].1 != 0.0 {
            return Err(CertifyError::BadMonotone("value at 0 must be 0".into()));
        }
        if breakpoints.len() < 2 {
            return Err(CertifyError::BadMonotone("need a positive breakpoint".into()));
        }
        for w in breakpoints.windows(2) {
            if !(w[1].0 > w[0].0) || !(w[1].1 > w[0].1) || !w[1].1.is_finite() {
                return Err(CertifyError::BadMonotone(format!(
                    "breakpoints ({}, {}) and ({}, {}) are not strictly increasing",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(Self { breakpoints })
    }

    pub fn identity() -> Self {
        Self {
            breakpoints: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn eval(&self, s: f64) -> f64 {
        if !(s > 0.0) {
            return if s.is_nan() { f64::NAN } else { 0.0 };
        }
        if s == f64::INFINITY {
            return f64::INFINITY;
        }
        let bp = &self.breakpoints;
        let k = bp.partition_point(|(x, _)| *x <= s).clamp(1, bp.len() - 1);
        let (x0, y0) = bp[k - 1];
        let (x1, y1) = bp[k];
        y0 + (s - x0) * (y1 - y0) / (x1 - x0)
    }
}

/// A class-K function given by an expression in `s` or by a table.
#[derive(Debug, Clone)]
pub enum KFunction {
    Expr(ScalarField),
    Table(MonotoneFn),
}

impl KFunction {
    pub fn parse(source: &str) -> Result<Self, ExprError> {
        Ok(KFunction::Expr(ScalarField::parse(source, &["s"])?))
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            KFunction::Expr(e) => e.eval_raw(&[s]),
            KFunction::Table(m) => m.eval(s),
        }
    }
}

/// Candidate certificate: `V`, an optional barrier `B`, and the comparison
/// functions and indicator used by the sandwich bound.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub v: ScalarField,
    pub b: Option<ScalarField>,
    pub alpha1: Option<KFunction>,
    pub alpha2: Option<KFunction>,
    pub omega: Option<ProperIndicator>,
    /// Closure of the open certificate domain `D`.
    pub domain: SetSpec,
}

impl Certificate {
    pub fn new(v: ScalarField, domain: SetSpec) -> Self {
        Self {
            v,
            b: None,
            alpha1: None,
            alpha2: None,
            omega: None,
            domain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// Slack allowed in non-strict inequalities.
    pub tol: f64,
    /// Strict inequalities are checked as `<= -strict_tol * (1 + |value|)`.
    pub strict_tol: f64,
    /// Positive-definiteness floor `pd_coeff * min(r, r^2)`.
    pub pd_coeff: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            strict_tol: 1e-9,
            pd_coeff: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    PassSampled,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub status: CheckStatus,
    /// Smallest slack `rhs - lhs` after tolerances; negative means failure.
    pub margin: f64,
    pub worst_point: Vec<f64>,
    pub checked: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertCounterexample {
    pub x: Vec<f64>,
    pub condition: String,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub conditions: BTreeMap<String, ConditionReport>,
    pub counterexamples: Vec<CertCounterexample>,
    /// Grid points outside the open domain, not checked.
    pub skipped: usize,
    /// U was unbounded and checked only on the grid domain.
    pub unsafe_truncated: bool,
    pub tolerances: Tolerances,
    pub semantics: &'static str,
}

impl CertificateReport {
    fn new(tolerances: Tolerances) -> Self {
        Self {
            conditions: BTreeMap::new(),
            counterexamples: Vec::new(),
            skipped: 0,
            unsafe_truncated: false,
            tolerances,
            semantics: "sampled",
        }
    }

    pub fn passed(&self) -> bool {
        self.conditions
            .values()
            .all(|c| c.status == CheckStatus::PassSampled)
    }

    pub fn status(&self, condition: &str) -> Option<CheckStatus> {
        self.conditions.get(condition).map(|c| c.status)
    }

    /// Evaluates `check` at every point; `check` returns `(lhs, rhs)` for an
    /// inequality `lhs <= rhs` with tolerances already folded into `rhs`.
    fn record<F>(&mut self, name: &str, points: &[Vec<f64>], check: F)
    where
        F: Fn(&[f64]) -> (f64, f64) + Sync,
    {
        struct Acc {
            worst: Option<(f64, usize, f64, f64)>,
            failures: usize,
        }
        let better = |a: &(f64, usize, f64, f64), b: &(f64, usize, f64, f64)| {
            a.0.total_cmp(&b.0)
                .then_with(|| {
                    points[a.1]
                        .partial_cmp(&points[b.1])
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .is_lt()
        };
        let acc = (0..points.len())
            .into_par_iter()
            .map(|i| {
                let (lhs, rhs) = check(&points[i]);
                let mut slack = rhs - lhs;
                if slack.is_nan() {
                    slack = f64::NEG_INFINITY;
                }
                Acc {
                    worst: Some((slack, i, lhs, rhs)),
                    failures: usize::from(slack < 0.0),
                }
            })
            .reduce(
                || Acc {
                    worst: None,
                    failures: 0,
                },
                |a, b| Acc {
                    worst: match (a.worst, b.worst) {
                        (Some(x), Some(y)) => Some(if better(&y, &x) { y } else { x }),
                        (x, y) => x.or(y),
                    },
                    failures: a.failures + b.failures,
                },
            );
        let (margin, worst_point) = match acc.worst {
            Some((slack, i, lhs, rhs)) => {
                if slack < 0.0 {
                    self.counterexamples.push(CertCounterexample {
                        x: points[i].clone(),
                        condition: name.to_string(),
                        lhs,
                        rhs,
                    });
                }
                (slack, points[i].clone())
            }
            None => (f64::INFINITY, Vec::new()),
        };
        self.conditions.insert(
            name.to_string(),
            ConditionReport {
                status: if acc.failures == 0 {
                    CheckStatus::PassSampled
                } else {
                    CheckStatus::Fail
                },
                margin,
                worst_point,
                checked: points.len(),
                failures: acc.failures,
            },
        );
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn lie_terms(grad: &VectorField, sys: &PerturbedSystem, x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut f = vec![0.0; n];
    grad.eval_into(x, &mut g);
    sys.f().eval_into(x, &mut f);
    (dot(&g, &f), sys.delta() * norm(&g))
}

/// `sup_{|d| <= δ} ∇V(x)·(f(x) + d) = ∇V·f + δ|∇V|`.
pub fn worst_case_lie(grad_v: &VectorField, sys: &PerturbedSystem, x: &[f64]) -> f64 {
    let (drift, spread) = lie_terms(grad_v, sys, x);
    drift + spread
}

/// `inf_{|d| <= δ} ∇B(x)·(f(x) + d) = ∇B·f - δ|∇B|`.
pub fn min_case_lie(grad_b: &VectorField, sys: &PerturbedSystem, x: &[f64]) -> f64 {
    let (drift, spread) = lie_terms(grad_b, sys, x);
    drift - spread
}

fn check_dims(cert: &Certificate, sys: &PerturbedSystem) -> Result<(), CertifyError> {
    let expected = sys.dim();
    for got in [Some(cert.v.dim()), cert.b.as_ref().map(ScalarField::dim)]
        .into_iter()
        .flatten()
    {
        if got != expected {
            return Err(CertifyError::Dimension { expected, got });
        }
    }
    Ok(())
}

/// Grid points inside the open domain, and the number skipped.
fn domain_points(grid: &Grid, in_domain: impl Fn(&[f64]) -> bool) -> (Vec<Vec<f64>>, usize) {
    let mut pts = Vec::new();
    let mut skipped = 0;
    let mut p = vec![0.0; grid.dim()];
    for i in 0..grid.len() {
        grid.point_into(i, &mut p);
        if in_domain(&p) {
            pts.push(p.clone());
        } else {
            skipped += 1;
        }
    }
    (pts, skipped)
}

/// Sandwich bound `α₁(ω) <= V <= α₂(ω)` and decrease `sup_d ∇V·(f+d) <= -V`
/// at every grid point of the open domain.
pub fn check_theorem8(
    cert: &Certificate,
    sys: &PerturbedSystem,
    grid: &Grid,
    tolerances: Tolerances,
) -> Result<CertificateReport, CertifyError> {
    check_dims(cert, sys)?;
    let alpha1 = cert.alpha1.as_ref().ok_or(CertifyError::Missing("alpha1"))?;
    let alpha2 = cert.alpha2.as_ref().ok_or(CertifyError::Missing("alpha2"))?;
    let omega = cert.omega.as_ref().ok_or(CertifyError::Missing("omega"))?;
    let grad = cert.v.grad();
    let tol = tolerances.tol;
    let (pts, skipped) = domain_points(grid, |x| {
        omega.in_domain(x) && cert.domain.interior_contains(x)
    });
    let mut report = CertificateReport::new(tolerances);
    report.skipped = skipped;
    let v = &cert.v;
    report.record("eq4_lower", &pts, |x| {
        (alpha1.eval(omega.eval(x)), v.eval_raw(x) + tol)
    });
    report.record("eq4_upper", &pts, |x| {
        (v.eval_raw(x), alpha2.eval(omega.eval(x)) + tol)
    });
    report.record("eq5_decrease", &pts, |x| {
        (worst_case_lie(&grad, sys, x), -v.eval_raw(x) + tol)
    });
    Ok(report)
}

/// The four sufficient conditions for stability with safety: `V` positive
/// definite w.r.t. `A`, strict worst-case decrease off `A`, `B` separating
/// `W` from `U`, and `B` nondecreasing under every disturbance.
pub fn check_prop11(
    cert: &Certificate,
    sys: &PerturbedSystem,
    a: &SetSpec,
    w: &SetSpec,
    u: &SetSpec,
    grid: &Grid,
    tolerances: Tolerances,
) -> Result<CertificateReport, CertifyError> {
    check_dims(cert, sys)?;
    let b = cert.b.as_ref().ok_or(CertifyError::Missing("B"))?;
    let all: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.point(i)).collect();
    if all
        .iter()
        .chain(a.box_corners().iter())
        .any(|x| a.contains_raw(x) && u.contains_raw(x))
    {
        return Err(CertifyError::TargetMeetsUnsafe);
    }
    let grad_v = cert.v.grad();
    let grad_b = b.grad();
    let v = &cert.v;
    let Tolerances {
        tol,
        strict_tol,
        pd_coeff,
    } = tolerances;
    let (d_pts, skipped) = domain_points(grid, |x| cert.domain.interior_contains(x));
    let mut report = CertificateReport::new(tolerances);
    report.skipped = skipped;

    let in_a: Vec<Vec<f64>> = d_pts.iter().filter(|x| a.contains_raw(x)).cloned().collect();
    let off_a: Vec<Vec<f64>> = d_pts.iter().filter(|x| !a.contains_raw(x)).cloned().collect();
    report.record("c1_zero_on_a", &in_a, |x| (v.eval_raw(x), tol));
    report.record("c1_positive_off_a", &off_a, |x| {
        let r = a.dist_raw(x);
        (pd_coeff * r.min(r * r), v.eval_raw(x) + tol)
    });

    let tube = grid.cell_radius();
    let outside_tube: Vec<Vec<f64>> = off_a
        .iter()
        .filter(|x| a.dist_raw(x) > tube)
        .cloned()
        .collect();
    report.record("c2_decrease", &outside_tube, |x| {
        let vx = v.eval_raw(x);
        (
            worst_case_lie(&grad_v, sys, x),
            -strict_tol * (1.0 + vx.abs()),
        )
    });

    let w_pts: Vec<Vec<f64>> = all
        .iter()
        .chain(w.box_corners().iter().filter(|c| grid.domain().contains(c)))
        .filter(|x| w.contains_raw(x))
        .cloned()
        .collect();
    if w_pts.is_empty() {
        return Err(CertifyError::NoGridPoints("W"));
    }
    report.record("c3_nonnegative_on_w", &w_pts, |x| (0.0, b.eval_raw(x) + tol));
    let u_pts: Vec<Vec<f64>> = all.iter().filter(|x| u.contains_raw(x)).cloned().collect();
    report.unsafe_truncated = u.bounding_box().is_none();
    report.record("c3_negative_on_u", &u_pts, |x| {
        let bx = b.eval_raw(x);
        (bx, -strict_tol * (1.0 + bx.abs()))
    });

    report.record("c4_barrier_nondecreasing", &d_pts, |x| {
        (0.0, min_case_lie(&grad_b, sys, x) + tol)
    });
    Ok(report)
}

/// `B = c - V` with `c = (1 + margin) * max V` over grid points and box
/// corners of `K ∪ W` (`c = margin` when that maximum is zero).
pub fn barrier_from_lyapunov(
    v: &ScalarField,
    k: &SetSpec,
    w: &SetSpec,
    grid: &Grid,
    margin: f64,
) -> Result<(ScalarField, f64), CertifyError> {
    let mut pts: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| grid.point(i))
        .filter(|x| k.contains_raw(x) || w.contains_raw(x))
        .collect();
    if pts.is_empty() {
        return Err(CertifyError::NoGridPoints("K ∪ W"));
    }
    pts.extend(k.box_corners());
    pts.extend(w.box_corners());
    let max = pts
        .iter()
        .map(|x| v.eval_raw(x))
        .fold(f64::NEG_INFINITY, f64::max);
    let c = if max > 0.0 { (1.0 + margin) * max } else { margin };
    let expr = Expr::Sub(Box::new(Expr::Const(c)), Box::new(v.expr().clone()));
    let vars: Arc<[String]> = v.vars().clone();
    Ok((ScalarField::from_expr(expr, vars)?, c))
}
