//! Numerical converse Lyapunov construction.
//!
//! Pipeline: estimate a KL envelope of the proper indicator along battery
//! trajectories, fit a comparison pair `α₁(β(s,t)) <= α₂(s) e^{-λt}` with
//! `α₁(r) = r^p`, evaluate `V(x) = max_{d,t} α₁(ω(φ(t;x,d))) e^{μt}`, and
//! validate the sandwich and decrease inequalities on sampled points.
//!
//! The supremum over all admissible disturbances is replaced by the battery
//! maximum, so the computed `V` is a lower estimate of the exact one.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::certify::{CertifyError, MonotoneFn};
use crate::dynamics::{
    DisturbancePolicy, DynamicsError, IntegrationSettings, PerturbedSystem, Stepper, Termination,
};
use crate::geometry::{BoxSet, Grid, ProperIndicator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConverseError {
    #[error("trajectory from {x0:?} under {policy} does not settle (left D, blew up, or stayed away from A)")]
    NotSettling { x0: Vec<f64>, policy: String },
    #[error("trajectory from {x0:?} under {policy} leaves the domain of the indicator")]
    Escaped { x0: Vec<f64>, policy: String },
    #[error("no sample point lies outside A")]
    NoSamples,
    #[error("estimated envelope shows no decay")]
    NoDecay,
    #[error("rate {lambda} exceeds {max} (safety factor times the measured decay rate {decay}); choose a smaller rate")]
    RateTooAggressive { lambda: f64, max: f64, decay: f64 },
    #[error("weight rate mu = {mu} must lie in (0, lambda = {lambda})")]
    BadWeight { mu: f64, lambda: f64 },
    #[error("no power p <= {0} gives a finite comparison function within the horizon")]
    NoFiniteAlpha2(u32),
    #[error("comparison inequality fails at table entry (s = {s}, t = {t}) by {margin}")]
    FitCheckFailed { s: f64, t: f64, margin: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
}

/// Knobs of the envelope estimate and the comparison fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConverseOptions {
    pub n_bins: usize,
    pub n_times: usize,
    /// A run settles when the indicator over its last time bin is at most
    /// this fraction of its maximum along the run.
    pub settle_ratio: f64,
    /// Rates must satisfy `λ <= safety_factor * λ̂`.
    pub safety_factor: f64,
    pub max_power: u32,
}

impl Default for ConverseOptions {
    fn default() -> Self {
        Self {
            n_bins: 20,
            n_times: 200,
            settle_ratio: 0.1,
            safety_factor: 0.5,
            max_power: 8,
        }
    }
}

/// Sampled KL bound `β̂(s, t)`, nondecreasing in `s` and nonincreasing in
/// `t`. Row `k` bounds every run whose initial indicator is at most
/// `s_bins[k]`; column `j` bounds the indicator on `[t_samples[j], horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlEnvelope {
    pub s_bins: Vec<f64>,
    pub t_samples: Vec<f64>,
    pub table: Vec<Vec<f64>>,
    pub decay_rate: f64,
    pub horizon: f64,
}

impl KlEnvelope {
    /// Row index of the smallest bin bounding `s`, if any.
    pub fn row_for(&self, s: f64) -> Option<usize> {
        let k = self.s_bins.partition_point(|b| *b < s);
        (k < self.s_bins.len()).then_some(k)
    }

    pub fn column_for(&self, t: f64) -> usize {
        self.t_samples
            .partition_point(|x| *x <= t + 1e-12)
            .saturating_sub(1)
    }

    /// Conservative lookup: the bounding bin row at the latest sample
    /// time not after `t`; `+inf` beyond the sampled range of `s`.
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match self.row_for(s) {
            Some(k) => self.table[k][self.column_for(t)],
            None => f64::INFINITY,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "s,t,beta")?;
        for (k, s) in self.s_bins.iter().enumerate() {
            for (j, t) in self.t_samples.iter().enumerate() {
                writeln!(w, "{s},{t},{}", self.table[k][j])?;
            }
        }
        Ok(())
    }
}

/// Runs every battery policy from `x0` and calls `visit(t, x)` on the
/// initial state and every step, stopping early when `visit` returns false.
fn for_each_step<F: FnMut(f64, &[f64]) -> bool>(
    sys: &PerturbedSystem,
    x0: &[f64],
    policy: &DisturbancePolicy,
    settings: &IntegrationSettings,
    mut visit: F,
) -> Result<Option<Termination>, DynamicsError> {
    let mut st = Stepper::new(sys, x0, policy, settings)?;
    if !visit(0.0, x0) {
        return Ok(None);
    }
    while st.advance() {
        if !visit(st.time(), st.state()) {
            return Ok(None);
        }
    }
    Ok(Some(st.termination().unwrap_or(Termination::BlowUp)))
}

/// Builds the envelope from battery runs out of `points`, which should
/// sample the region of interest inside the domain of the indicator.
pub fn estimate_kl(
    sys: &PerturbedSystem,
    omega: &ProperIndicator,
    points: &[Vec<f64>],
    battery: &[DisturbancePolicy],
    settings: &IntegrationSettings,
    options: &ConverseOptions,
) -> Result<KlEnvelope, ConverseError> {
    settings.validate()?;
    let horizon = settings.horizon;
    let m = options.n_times.max(2);
    let dt_bin = horizon / m as f64;
    let t_samples: Vec<f64> = (0..m).map(|j| j as f64 * dt_bin).collect();

    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|i| (0..battery.len()).map(move |p| (i, p)))
        .collect();
    let runs: Vec<Result<(usize, Vec<f64>), ConverseError>> = jobs
        .into_par_iter()
        .map(|(i, p)| {
            let x0 = &points[i];
            let mut cols = vec![0.0f64; m];
            let mut escaped = false;
            let end = for_each_step(sys, x0, &battery[p], settings, |t, x| {
                let w = omega.eval(x);
                if !w.is_finite() {
                    escaped = true;
                    return false;
                }
                let j = ((t / dt_bin + 1e-9).floor() as usize).min(m - 1);
                cols[j] = cols[j].max(w);
                true
            })?;
            let peak = cols.iter().copied().fold(0.0, f64::max);
            let settled = cols[m - 1] <= options.settle_ratio * peak || peak == 0.0;
            if escaped || end != Some(Termination::HorizonReached) || !settled {
                return Err(ConverseError::NotSettling {
                    x0: x0.clone(),
                    policy: battery[p].label(),
                });
            }
            Ok((i, cols))
        })
        .collect();
    let mut per_run = Vec::with_capacity(runs.len());
    for r in runs {
        per_run.push(r?);
    }

    let initial: Vec<f64> = points.iter().map(|x| omega.eval(x)).collect();
    let mut positive: Vec<f64> = initial.iter().copied().filter(|w| *w > 0.0).collect();
    if positive.is_empty() {
        return Err(ConverseError::NoSamples);
    }
    positive.sort_by(f64::total_cmp);
    let n_bins = options.n_bins.clamp(1, positive.len());
    let mut s_bins: Vec<f64> = (1..=n_bins)
        .map(|k| positive[(k * positive.len()).div_ceil(n_bins) - 1])
        .collect();
    s_bins.dedup();

    let mut table = vec![vec![0.0f64; m]; s_bins.len()];
    for (i, cols) in &per_run {
        // Runs from A land in the first bin.
        let k = s_bins.partition_point(|b| *b < initial[*i]).min(s_bins.len() - 1);
        for row in table.iter_mut().skip(k) {
            for (acc, v) in row.iter_mut().zip(cols) {
                *acc = acc.max(*v);
            }
        }
    }
    for row in &mut table {
        for j in (0..m - 1).rev() {
            row[j] = row[j].max(row[j + 1]);
        }
    }

    let decay_rate = fit_decay(&t_samples, &table).ok_or(ConverseError::NoDecay)?;
    Ok(KlEnvelope {
        s_bins,
        t_samples,
        table,
        decay_rate,
        horizon,
    })
}

/// Smallest least-squares decay rate of `log β̂` over the rows with at
/// least two positive entries.
fn fit_decay(t: &[f64], table: &[Vec<f64>]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for row in table {
        let pts: Vec<(f64, f64)> = t
            .iter()
            .zip(row)
            .filter(|(_, v)| **v > 0.0)
            .map(|(t, v)| (*t, v.ln()))
            .collect();
        if pts.len() < 2 {
            continue;
        }
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
        if sxx <= 0.0 {
            continue;
        }
        let rate = -sxy / sxx;
        best = Some(best.map_or(rate, |b: f64| b.min(rate)));
    }
    best.filter(|r| *r > 0.0)
}

/// `α₁(r) = r^p` and a piecewise-linear `α₂` with
/// `α₁(β̂(s_k, t_j)) <= α₂(s_k) e^{-λ t_j}` at every table entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SontagPair {
    pub power: u32,
    pub alpha2: MonotoneFn,
    pub lambda: f64,
    /// `(s_k, max_j α₁(β̂(s_k, t_j)) e^{λ t_j})` before enveloping.
    pub row_bounds: Vec<(f64, f64)>,
    /// Smallest slack of the comparison inequality over the table.
    pub margin: f64,
}

impl SontagPair {
    pub fn alpha1(&self, r: f64) -> f64 {
        r.powi(self.power as i32)
    }

    pub fn alpha2(&self, s: f64) -> f64 {
        self.alpha2.eval(s)
    }

    /// Certified bound on `α₁(ω(φ(t))) e^{λt}` for runs starting at
    /// indicator value `s`; `None` beyond the sampled bins.
    pub fn row_bound(&self, s: f64) -> Option<f64> {
        let k = self.row_bounds.partition_point(|(b, _)| *b < s);
        self.row_bounds.get(k).map(|r| r.1)
    }
}

pub fn sontag_fit(
    env: &KlEnvelope,
    lambda: f64,
    options: &ConverseOptions,
) -> Result<SontagPair, ConverseError> {
    let max = options.safety_factor * env.decay_rate;
    if !(lambda > 0.0) || lambda > max * (1.0 + 1e-9) {
        return Err(ConverseError::RateTooAggressive {
            lambda,
            max,
            decay: env.decay_rate,
        });
    }
    let last = env.t_samples.len() - 1;
    let weights: Vec<f64> = env.t_samples.iter().map(|t| (lambda * t).exp()).collect();
    let power = (1..=options.max_power)
        .find(|&p| {
            env.table.iter().all(|row| {
                let (arg, val) = row
                    .iter()
                    .zip(&weights)
                    .map(|(b, w)| b.powi(p as i32) * w)
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
                val.is_finite() && (arg < last || val == 0.0)
            })
        })
        .ok_or(ConverseError::NoFiniteAlpha2(options.max_power))?;

    let row_bounds: Vec<(f64, f64)> = env
        .s_bins
        .iter()
        .zip(&env.table)
        .map(|(s, row)| {
            let a = row
                .iter()
                .zip(&weights)
                .map(|(b, w)| b.powi(power as i32) * w)
                .fold(0.0, f64::max);
            (*s, a)
        })
        .collect();

    // α₂ takes row k+1's bound at s_k, so it dominates every run whose
    // initial indicator lies in (s_k, s_{k+1}].
    let k_max = row_bounds.len();
    let mut bps: Vec<(f64, f64)> = Vec::with_capacity(k_max);
    let mut prev = 0.0f64;
    for k in 0..k_max {
        let target = if k + 1 < k_max {
            row_bounds[k + 1].1
        } else {
            row_bounds[k].1 * 1.01
        };
        let value = target.max(prev * (1.0 + 1e-9) + f64::MIN_POSITIVE);
        bps.push((row_bounds[k].0, value));
        prev = value;
    }
    let alpha2 = MonotoneFn::new(bps)?;
    let pair = SontagPair {
        power,
        alpha2,
        lambda,
        row_bounds,
        margin: f64::INFINITY,
    };

    let mut margin = f64::INFINITY;
    for (k, s) in env.s_bins.iter().enumerate() {
        for (j, t) in env.t_samples.iter().enumerate() {
            let lhs = pair.alpha1(env.table[k][j]);
            let rhs = pair.alpha2(*s) * (-lambda * t).exp();
            let slack = rhs - lhs;
            if slack < -1e-12 * lhs.abs().max(1.0) {
                return Err(ConverseError::FitCheckFailed {
                    s: *s,
                    t: *t,
                    margin: slack,
                });
            }
            margin = margin.min(slack);
        }
    }
    Ok(SontagPair { margin, ..pair })
}

/// Numerically defined `V(x) = max_{d,t} α₁(ω(φ(t;x,d))) e^{μt}`.
#[derive(Debug, Clone)]
pub struct NumericLyapunov<'a> {
    pub sys: &'a PerturbedSystem,
    pub omega: &'a ProperIndicator,
    pub pair: &'a SontagPair,
    pub battery: &'a [DisturbancePolicy],
    pub settings: IntegrationSettings,
    pub mu: f64,
}

impl<'a> NumericLyapunov<'a> {
    pub fn new(
        sys: &'a PerturbedSystem,
        omega: &'a ProperIndicator,
        pair: &'a SontagPair,
        battery: &'a [DisturbancePolicy],
        settings: IntegrationSettings,
        mu: f64,
    ) -> Result<Self, ConverseError> {
        if !(mu > 0.0) || !(mu < pair.lambda) {
            return Err(ConverseError::BadWeight {
                mu,
                lambda: pair.lambda,
            });
        }
        settings.validate()?;
        Ok(Self {
            sys,
            omega,
            pair,
            battery,
            settings,
            mu,
        })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, ConverseError> {
        let mut best = 0.0f64;
        for policy in self.battery {
            best = best.max(self.eval_policy(x, policy)?);
        }
        Ok(best)
    }

    /// Contribution of one policy. The scan stops once the certified
    /// bound, which decays at rate `λ - μ`, drops below the running max.
    pub fn eval_policy(&self, x: &[f64], policy: &DisturbancePolicy) -> Result<f64, ConverseError> {
        let bound = self.pair.row_bound(self.omega.eval(x));
        let gap = self.pair.lambda - self.mu;
        let mut best = 0.0f64;
        let mut escaped = false;
        for_each_step(self.sys, x, policy, &self.settings, |t, y| {
            let w = self.omega.eval(y);
            if !w.is_finite() {
                escaped = true;
                return false;
            }
            best = best.max(self.pair.alpha1(w) * (self.mu * t).exp());
            match bound {
                Some(b) => b * (-gap * t).exp() > best,
                None => true,
            }
        })?;
        if escaped {
            return Err(ConverseError::Escaped {
                x0: x.to_vec(),
                policy: policy.label(),
            });
        }
        Ok(best)
    }

    /// `V` at every grid point inside the indicator's domain.
    pub fn grid_values(&self, grid: &Grid) -> Vec<Option<f64>> {
        (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let x = grid.point(i);
                if !self.omega.in_domain(&x) {
                    return None;
                }
                self.eval(&x).ok()
            })
            .collect()
    }

    pub fn write_grid_csv<W: Write>(
        &self,
        mut w: W,
        grid: &Grid,
        values: &[Option<f64>],
        vars: &[String],
    ) -> io::Result<()> {
        writeln!(w, "{},omega,V", vars.join(","))?;
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v {
                let x = grid.point(i);
                let coords: Vec<String> = x.iter().map(|c| c.to_string()).collect();
                writeln!(w, "{},{},{v}", coords.join(","), self.omega.eval(&x))?;
            }
        }
        Ok(())
    }
}

/// Uniform seeded samples from a bounded box.
pub fn sample_box(region: &BoxSet, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            region
                .lo()
                .iter()
                .zip(region.hi())
                .map(|(l, h)| if l < h { rng.random_range(*l..*h) } else { *l })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationFailure {
    pub x: Vec<f64>,
    pub check: &'static str,
    pub tau: Option<f64>,
    pub policy: Option<String>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub passed: bool,
    /// Smallest relative slack `1 - lhs / rhs` seen (`rhs` includes `tol`).
    pub worst_margin: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub taus: Vec<f64>,
    pub tol: f64,
    pub mu: f64,
    pub sandwich_lower: CheckSummary,
    pub sandwich_upper: CheckSummary,
    pub decrease: CheckSummary,
    /// Smallest `-ln(V(φ(τ)) / V(x)) / τ` over runs with both values positive.
    pub min_decrease_rate: Option<f64>,
    pub failures: Vec<ValidationFailure>,
    pub failure_count: usize,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.sandwich_lower.passed && self.sandwich_upper.passed && self.decrease.passed
    }
}

pub const DEFAULT_TAUS: [f64; 3] = [0.5, 1.0, 2.0];

const ABS_FLOOR: f64 = 1e-12;

/// Checks `α₁(ω(x)) <= V(x) <= α₂(ω(x))(1+tol)` and
/// `V(φ(τ;x,d)) <= V(x) e^{-μτ} (1+tol)` for every sample, battery policy
/// and `τ`.
pub fn validate_v(
    v: &NumericLyapunov,
    samples: &[Vec<f64>],
    taus: &[f64],
    tol: f64,
) -> Result<ValidationReport, ConverseError> {
    struct PointResult {
        lower: (f64, Option<ValidationFailure>),
        upper: (f64, Option<ValidationFailure>),
        decrease: Vec<(f64, Option<ValidationFailure>)>,
        rates: Vec<f64>,
    }
    let rel = |lhs: f64, rhs: f64| {
        if rhs > 0.0 {
            1.0 - lhs / rhs
        } else if lhs <= ABS_FLOOR {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    };
    let results: Vec<Result<PointResult, ConverseError>> = samples
        .par_iter()
        .map(|x| {
            let w = v.omega.eval(x);
            let vx = v.eval(x)?;
            let fail = |check, tau, policy: Option<String>, lhs, rhs| ValidationFailure {
                x: x.clone(),
                check,
                tau,
                policy,
                lhs,
                rhs,
            };
            let lo_l = v.pair.alpha1(w);
            let lo_r = vx * (1.0 + 1e-12) + ABS_FLOOR;
            let lower = (
                rel(lo_l, lo_r),
                (lo_l > lo_r).then(|| fail("sandwich_lower", None, None, lo_l, lo_r)),
            );
            let up_r = v.pair.alpha2(w) * (1.0 + tol) + ABS_FLOOR;
            let upper = (
                rel(vx, up_r),
                (vx > up_r).then(|| fail("sandwich_upper", None, None, vx, up_r)),
            );
            let mut decrease = Vec::new();
            let mut rates = Vec::new();
            for policy in v.battery {
                for &tau in taus {
                    let s = v.settings.with_horizon(tau);
                    let mut y = x.clone();
                    let mut st = Stepper::new(v.sys, x, policy, &s)?;
                    while st.advance() {}
                    y.copy_from_slice(st.state());
                    if !v.omega.in_domain(&y) {
                        return Err(ConverseError::Escaped {
                            x0: x.clone(),
                            policy: policy.label(),
                        });
                    }
                    let vy = v.eval(&y)?;
                    let rhs = vx * (-v.mu * tau).exp() * (1.0 + tol) + ABS_FLOOR;
                    decrease.push((
                        rel(vy, rhs),
                        (vy > rhs).then(|| fail("decrease", Some(tau), Some(policy.label()), vy, rhs)),
                    ));
                    if vx > ABS_FLOOR && vy > ABS_FLOOR {
                        rates.push(-(vy / vx).ln() / tau);
                    }
                }
            }
            Ok(PointResult {
                lower,
                upper,
                decrease,
                rates,
            })
        })
        .collect();

    let mut failures = Vec::new();
    let mut summarize = |items: Vec<(f64, Option<ValidationFailure>)>| {
        let checked = items.len();
        let mut worst = f64::INFINITY;
        let mut passed = true;
        for (m, f) in items {
            worst = worst.min(m);
            if let Some(f) = f {
                passed = false;
                failures.push(f);
            }
        }
        CheckSummary {
            passed,
            worst_margin: worst,
            checked,
        }
    };
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut dec = Vec::new();
    let mut min_rate: Option<f64> = None;
    for r in results {
        let r = r?;
        lower.push(r.lower);
        upper.push(r.upper);
        dec.extend(r.decrease);
        for rate in r.rates {
            min_rate = Some(min_rate.map_or(rate, |m: f64| m.min(rate)));
        }
    }
    let sandwich_lower = summarize(lower);
    let sandwich_upper = summarize(upper);
    let decrease = summarize(dec);
    let failure_count = failures.len();
    failures.truncate(32);
    Ok(ValidationReport {
        samples: samples.len(),
        taus: taus.to_vec(),
        tol,
        mu: v.mu,
        sandwich_lower,
        sandwich_upper,
        decrease,
        min_decrease_rate: min_rate,
        failures,
        failure_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::default_policy_battery;
    use crate::expr::VectorField;
    use crate::geometry::SetSpec;

    fn linear() -> (PerturbedSystem, ProperIndicator, Vec<DisturbancePolicy>) {
        let sys = PerturbedSystem::new(VectorField::parse(&["-x"], &["x"]).unwrap(), 0.0).unwrap();
        let omega =
            ProperIndicator::new(SetSpec::Box(BoxSet::interval(0.0, 0.0).unwrap()), None).unwrap();
        let battery = default_policy_battery(&sys, 0, 1, 0.1, &[]).unwrap();
        (sys, omega, battery)
    }

    fn linear_points() -> Vec<Vec<f64>> {
        (0..=40).map(|k| vec![-1.0 + k as f64 * 0.05]).collect()
    }

    #[test]
    fn linear_envelope_matches_closed_form() {
        let (sys, omega, battery) = linear();
        let settings = IntegrationSettings::new(1e-3, 10.0);
        let env = estimate_kl(&sys, &omega, &linear_points(), &battery, &settings, &ConverseOptions::default())
            .unwrap();
        for (k, s) in env.s_bins.iter().enumerate() {
            assert!(env.table[k][0] >= *s);
            for (j, t) in env.t_samples.iter().enumerate() {
                if *t <= 5.0 {
                    let exact = s * (-t).exp();
                    assert!((env.table[k][j] - exact).abs() <= 0.05 * exact, "{s} {t}");
                }
            }
        }
        assert!((env.decay_rate - 1.0).abs() < 0.02, "{}", env.decay_rate);
        for row in &env.table {
            assert!(row.windows(2).all(|w| w[1] <= w[0]));
        }
        for j in 0..env.t_samples.len() {
            assert!(env.table.windows(2).all(|w| w[1][j] >= w[0][j]));
        }
    }

    #[test]
    fn linear_sontag_pair_is_identity_on_bins() {
        let (sys, omega, battery) = linear();
        let settings = IntegrationSettings::new(1e-3, 10.0);
        let opts = ConverseOptions::default();
        let env = estimate_kl(&sys, &omega, &linear_points(), &battery, &settings, &opts).unwrap();
        let pair = sontag_fit(&env, 0.5, &opts).unwrap();
        assert_eq!(pair.power, 1);
        for (s, a) in &pair.row_bounds {
            assert!((a - s).abs() <= 1e-9, "{s} {a}");
        }
        assert!(pair.margin >= 0.0);
        assert!(matches!(
            sontag_fit(&env, 2.0 * env.decay_rate, &opts),
            Err(ConverseError::RateTooAggressive { .. })
        ));
    }

    #[test]
    fn linear_v_equals_indicator() {
        let (sys, omega, battery) = linear();
        let settings = IntegrationSettings::new(1e-3, 10.0);
        let opts = ConverseOptions::default();
        let env = estimate_kl(&sys, &omega, &linear_points(), &battery, &settings, &opts).unwrap();
        let pair = sontag_fit(&env, 0.5, &opts).unwrap();
        let v = NumericLyapunov::new(&sys, &omega, &pair, &battery, settings, 0.25).unwrap();
        for x in [-0.8, -0.3, 0.0, 0.45, 1.0] {
            let got = v.eval(&[x]).unwrap();
            assert!((got - f64::abs(x)).abs() < 1e-12, "{x} {got}");
        }
        let report = validate_v(&v, &sample_box(&BoxSet::interval(-1.0, 1.0).unwrap(), 50, 5), &DEFAULT_TAUS, 1e-3).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn non_settling_region_is_rejected() {
        let sys = PerturbedSystem::new(VectorField::parse(&["x"], &["x"]).unwrap(), 0.0).unwrap();
        let omega = ProperIndicator::new(
            SetSpec::Box(BoxSet::interval(0.0, 0.0).unwrap()),
            Some(SetSpec::Box(BoxSet::interval(-2.0, 2.0).unwrap())),
        )
        .unwrap();
        let battery = default_policy_battery(&sys, 0, 1, 0.1, &[]).unwrap();
        let err = estimate_kl(
            &sys,
            &omega,
            &[vec![0.5]],
            &battery,
            &IntegrationSettings::new(1e-2, 5.0),
            &ConverseOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ConverseError::NotSettling { ref x0, .. } if x0 == &vec![0.5]));
    }
}
