//! Sampled reachability analysis and Lyapunov-barrier certificates for
//! ODEs under bounded additive disturbances `x' = f(x) + d(t)`, `|d| <= δ`.

// NaN inputs must fail validation, hence `!(x > 0.0)` style checks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod certify;
pub mod cli;
pub mod converse;
pub mod dynamics;
pub mod expr;
pub mod geometry;
pub mod reach;
