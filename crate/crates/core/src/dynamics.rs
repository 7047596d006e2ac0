//! Fixed-step RK4 integration of `x' = f(x) + d(t)` with `|d(t)| <= delta`.
//!
//! Disturbances are sample-and-hold: `d` is drawn at the start of each step
//! and held across the four RK4 stages. Integration never panics on
//! divergence; non-finite states or states beyond the blow-up bound end the
//! trajectory with [`Termination::BlowUp`].

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{ScalarField, VectorField};
use crate::geometry::BoxSet;

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;
pub const DEFAULT_DWELL: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("perturbation radius must be finite and nonnegative, got {0}")]
    BadDelta(f64),
    #[error("step {dt} must be positive and no larger than the horizon {horizon}")]
    BadStep { dt: f64, horizon: f64 },
    #[error("initial state must be finite")]
    NonFiniteInitial,
    #[error("initial state has dimension {got}, system has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("policy list is empty")]
    NoPolicies,
    #[error("dwell time must be positive, got {0}")]
    BadDwell(f64),
}

/// The δ-perturbed system `x' ∈ f(x) + δB`.
#[derive(Debug, Clone)]
pub struct PerturbedSystem {
    f: VectorField,
    delta: f64,
}

impl PerturbedSystem {
    pub fn new(f: VectorField, delta: f64) -> Result<Self, DynamicsError> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(DynamicsError::BadDelta(delta));
        }
        Ok(Self { f, delta })
    }

    pub fn f(&self) -> &VectorField {
        &self.f
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self, DynamicsError> {
        Self::new(self.f.clone(), delta)
    }
}

/// Direction used by [`DisturbancePolicy::ExtremalFeedback`].
#[derive(Debug, Clone)]
pub enum FeedbackDirection {
    /// `∇g(x)/|∇g(x)|` for a set-defining function `g`.
    Gradient { label: String, grad: VectorField },
    Fixed(Vec<f64>),
}

/// A rule producing admissible disturbance signals.
#[derive(Debug, Clone)]
pub enum DisturbancePolicy {
    Zero,
    Constant(Vec<f64>),
    /// Uniform draws from the δ-sphere, redrawn every `dwell` time units.
    PiecewiseRandom { seed: u64, dwell: f64 },
    /// `d(x) = sign · δ · direction(x)`, re-evaluated at each step.
    ExtremalFeedback {
        direction: FeedbackDirection,
        sign: f64,
    },
}

impl DisturbancePolicy {
    pub fn gradient_feedback(label: &str, g: &ScalarField, sign: f64) -> Self {
        DisturbancePolicy::ExtremalFeedback {
            direction: FeedbackDirection::Gradient {
                label: label.to_string(),
                grad: g.grad(),
            },
            sign,
        }
    }

    /// Short human-readable description used in reports and file names.
    pub fn label(&self) -> String {
        fn vec(v: &[f64]) -> String {
            let parts: Vec<String> = v.iter().map(|x| format!("{x:+}")).collect();
            parts.join(",")
        }
        match self {
            DisturbancePolicy::Zero => "zero".to_string(),
            DisturbancePolicy::Constant(d) => format!("constant[{}]", vec(d)),
            DisturbancePolicy::PiecewiseRandom { seed, dwell } => {
                format!("random[seed={seed},dwell={dwell}]")
            }
            DisturbancePolicy::ExtremalFeedback { direction, sign } => {
                let s = if *sign >= 0.0 { "+" } else { "-" };
                match direction {
                    FeedbackDirection::Gradient { label, .. } => format!("feedback[{s}grad {label}]"),
                    FeedbackDirection::Fixed(v) => format!("feedback[{s}{}]", vec(v)),
                }
            }
        }
    }

    /// Seed of a random policy, if any.
    pub fn seed(&self) -> Option<u64> {
        match self {
            DisturbancePolicy::PiecewiseRandom { seed, .. } => Some(*seed),
            _ => None,
        }
    }

    pub fn source(&self, delta: f64, dim: usize) -> DisturbanceSource<'_> {
        let rng = match self {
            DisturbancePolicy::PiecewiseRandom { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        DisturbanceSource {
            policy: self,
            delta,
            rng,
            window: i64::MIN,
            held: vec![0.0; dim],
        }
    }
}

/// Per-trajectory disturbance generator (owns the random state).
pub struct DisturbanceSource<'a> {
    policy: &'a DisturbancePolicy,
    delta: f64,
    rng: Option<ChaCha8Rng>,
    window: i64,
    held: Vec<f64>,
}

impl DisturbanceSource<'_> {
    /// Writes `d(t, x)` into `out`, projected onto the δ-ball.
    pub fn sample(&mut self, t: f64, x: &[f64], out: &mut [f64]) {
        match self.policy {
            DisturbancePolicy::Zero => out.fill(0.0),
            DisturbancePolicy::Constant(d) => out.copy_from_slice(d),
            DisturbancePolicy::PiecewiseRandom { dwell, .. } => {
                let window = (t / dwell + 1e-9).floor() as i64;
                if window != self.window {
                    self.window = window;
                    let rng = self.rng.as_mut().expect("random policy has an rng");
                    loop {
                        let mut norm = 0.0;
                        for h in self.held.iter_mut() {
                            *h = rng.sample(StandardNormal);
                            norm += *h * *h;
                        }
                        let norm = norm.sqrt();
                        if norm > 1e-12 {
                            for h in self.held.iter_mut() {
                                *h *= self.delta / norm;
                            }
                            break;
                        }
                    }
                }
                out.copy_from_slice(&self.held);
            }
            DisturbancePolicy::ExtremalFeedback { direction, sign } => {
                match direction {
                    FeedbackDirection::Gradient { grad, .. } => grad.eval_into(x, out),
                    FeedbackDirection::Fixed(v) => out.copy_from_slice(v),
                }
                let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 && norm.is_finite() {
                    for o in out.iter_mut() {
                        *o *= sign * self.delta / norm;
                    }
                } else {
                    out.fill(0.0);
                }
            }
        }
        project_onto_ball(out, self.delta);
    }
}

fn project_onto_ball(d: &mut [f64], delta: f64) {
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        d.fill(0.0);
    } else if norm > delta {
        let s = if norm > 0.0 { delta / norm } else { 0.0 };
        for v in d.iter_mut() {
            *v *= s;
        }
    }
}

/// Why a trajectory stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    HorizonReached,
    LeftDomain,
    BlowUp,
}

/// Integration settings shared by a sweep.
#[derive(Debug, Clone)]
pub struct IntegrationSettings {
    pub dt: f64,
    pub horizon: f64,
    pub blowup_bound: f64,
    /// Stop with [`Termination::LeftDomain`] when the state leaves this box.
    pub domain: Option<BoxSet>,
}

impl IntegrationSettings {
    pub fn new(dt: f64, horizon: f64) -> Self {
        Self {
            dt,
            horizon,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            domain: None,
        }
    }

    pub fn with_horizon(&self, horizon: f64) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0) || !(self.dt <= self.horizon) || !self.horizon.is_finite() {
            return Err(DynamicsError::BadStep {
                dt: self.dt,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Number of steps; the last one is shortened to land on the horizon.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Step-by-step integrator for consumers that do not need the whole record.
pub struct Stepper<'a> {
    f: &'a VectorField,
    source: DisturbanceSource<'a>,
    settings: &'a IntegrationSettings,
    x: Vec<f64>,
    d: Vec<f64>,
    k: usize,
    n_steps: usize,
    t: f64,
    done: Option<Termination>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        sys: &'a PerturbedSystem,
        x0: &[f64],
        policy: &'a DisturbancePolicy,
        settings: &'a IntegrationSettings,
    ) -> Result<Self, DynamicsError> {
        settings.validate()?;
        let n = sys.dim();
        if x0.len() != n {
            return Err(DynamicsError::Dimension {
                expected: n,
                got: x0.len(),
            });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteInitial);
        }
        let mut source = policy.source(sys.delta(), n);
        let mut d = vec![0.0; n];
        source.sample(0.0, x0, &mut d);
        Ok(Self {
            f: sys.f(),
            source,
            settings,
            x: x0.to_vec(),
            d,
            k: 0,
            n_steps: settings.steps(),
            t: 0.0,
            done: None,
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Disturbance held over the next step.
    pub fn disturbance(&self) -> &[f64] {
        &self.d
    }

    pub fn termination(&self) -> Option<Termination> {
        self.done
    }

    /// Advances one step. Returns `false` once the trajectory has ended;
    /// the final state is then available via [`Stepper::state`].
    pub fn advance(&mut self) -> bool {
        if self.done.is_some() {
            return false;
        }
        let h = if self.k + 1 == self.n_steps {
            self.settings.horizon - self.t
        } else {
            self.settings.dt
        };
        let n = self.x.len();
        self.f.eval_into(&self.x, &mut self.k1);
        for i in 0..n {
            self.k1[i] += self.d[i];
            self.tmp[i] = self.x[i] + 0.5 * h * self.k1[i];
        }
        self.f.eval_into(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.k2[i] += self.d[i];
            self.tmp[i] = self.x[i] + 0.5 * h * self.k2[i];
        }
        self.f.eval_into(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.k3[i] += self.d[i];
            self.tmp[i] = self.x[i] + h * self.k3[i];
        }
        self.f.eval_into(&self.tmp, &mut self.k4);
        let mut norm2 = 0.0;
        for i in 0..n {
            self.k4[i] += self.d[i];
            self.tmp[i] =
                self.x[i] + h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
            norm2 += self.tmp[i] * self.tmp[i];
        }
        if !norm2.is_finite() || self.tmp.iter().any(|v| !v.is_finite()) {
            self.done = Some(Termination::BlowUp);
            return false;
        }
        self.k += 1;
        self.t = if self.k == self.n_steps {
            self.settings.horizon
        } else {
            self.k as f64 * self.settings.dt
        };
        std::mem::swap(&mut self.x, &mut self.tmp);
        if norm2.sqrt() > self.settings.blowup_bound {
            self.done = Some(Termination::BlowUp);
            return true;
        }
        if let Some(dom) = &self.settings.domain {
            if !dom.contains(&self.x) {
                self.done = Some(Termination::LeftDomain);
                return true;
            }
        }
        if self.k == self.n_steps {
            self.done = Some(Termination::HorizonReached);
            return true;
        }
        self.source.sample(self.t, &self.x, &mut self.d);
        true
    }
}

/// One solution `φ(t; x0, d)` of the perturbed system.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub policy: String,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Disturbance held on `[times[k], times[k+1])`.
    pub disturbances: Vec<Vec<f64>>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one time")
    }

    /// `max_k |disturbances[k]|`.
    pub fn max_disturbance(&self) -> f64 {
        self.disturbances
            .iter()
            .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t, x1..xn, d1..dn`.
    pub fn write_csv<W: Write>(&self, mut w: W, vars: &[String]) -> io::Result<()> {
        let dcols: Vec<String> = vars.iter().map(|v| format!("d_{v}")).collect();
        writeln!(w, "t,{},{}", vars.join(","), dcols.join(","))?;
        for ((t, x), d) in self.times.iter().zip(&self.states).zip(&self.disturbances) {
            let xs: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
            let ds: Vec<String> = d.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{t},{},{}", xs.join(","), ds.join(","))?;
        }
        Ok(())
    }
}

/// Integrates one trajectory, recording every step.
pub fn integrate(
    sys: &PerturbedSystem,
    x0: &[f64],
    policy: &DisturbancePolicy,
    settings: &IntegrationSettings,
) -> Result<Trajectory, DynamicsError> {
    let mut st = Stepper::new(sys, x0, policy, settings)?;
    let cap = settings.steps() + 1;
    let mut times = Vec::with_capacity(cap);
    let mut states = Vec::with_capacity(cap);
    let mut disturbances = Vec::with_capacity(cap);
    times.push(0.0);
    states.push(x0.to_vec());
    disturbances.push(st.disturbance().to_vec());
    let mut last_d = st.disturbance().to_vec();
    while st.advance() {
        times.push(st.time());
        states.push(st.state().to_vec());
        if st.termination().is_none() {
            last_d = st.disturbance().to_vec();
        }
        disturbances.push(last_d.clone());
    }
    Ok(Trajectory {
        policy: policy.label(),
        times,
        states,
        disturbances,
        termination: st.termination().unwrap_or(Termination::BlowUp),
    })
}

/// One trajectory per policy, in parallel. Errors stay per trajectory.
pub fn ensemble(
    sys: &PerturbedSystem,
    x0: &[f64],
    policies: &[DisturbancePolicy],
    settings: &IntegrationSettings,
) -> Result<Vec<Result<Trajectory, DynamicsError>>, DynamicsError> {
    if policies.is_empty() {
        return Err(DynamicsError::NoPolicies);
    }
    Ok(policies
        .par_iter()
        .map(|p| integrate(sys, x0, p, settings))
        .collect())
}

/// Number of deterministic constant policies for dimension `n`: the zero
/// policy, `±δ e_i`, and the `2^n` cube-vertex directions (which coincide
/// with the axes when `n = 1`).
pub fn constant_policy_count(n: usize) -> usize {
    1 + 2 * n + if n >= 2 { 1usize << n } else { 0 }
}

/// Finite family of disturbance policies standing in for "all admissible
/// signals": zero, extremal constants along axes and cube diagonals,
/// `±∇g` feedback for each set-defining function, and `n_random`
/// piecewise-random sphere policies.
pub fn default_policy_battery(
    sys: &PerturbedSystem,
    n_random: usize,
    seed: u64,
    dwell: f64,
    set_functions: &[(String, ScalarField)],
) -> Result<Vec<DisturbancePolicy>, DynamicsError> {
    if !(dwell > 0.0) {
        return Err(DynamicsError::BadDwell(dwell));
    }
    let n = sys.dim();
    let delta = sys.delta();
    let mut out = vec![DisturbancePolicy::Zero];
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut d = vec![0.0; n];
            d[i] = s * delta;
            out.push(DisturbancePolicy::Constant(d));
        }
    }
    if n >= 2 {
        let scale = delta / (n as f64).sqrt();
        for mask in 0..1usize << n {
            let d = (0..n)
                .map(|i| if mask >> i & 1 == 1 { -scale } else { scale })
                .collect();
            out.push(DisturbancePolicy::Constant(d));
        }
    }
    for (label, g) in set_functions {
        out.push(DisturbancePolicy::gradient_feedback(label, g, 1.0));
        out.push(DisturbancePolicy::gradient_feedback(label, g, -1.0));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_random {
        out.push(DisturbancePolicy::PiecewiseRandom {
            seed: seeder.random(),
            dwell,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sys(f: &str, delta: f64) -> PerturbedSystem {
        PerturbedSystem::new(VectorField::parse(&[f], &["x"]).unwrap(), delta).unwrap()
    }

    #[test]
    fn linear_decay_matches_closed_form() {
        let s = sys("-x", 0.0);
        let tr = integrate(&s, &[1.0], &DisturbancePolicy::Zero, &IntegrationSettings::new(1e-3, 1.0))
            .unwrap();
        assert_eq!(tr.termination, Termination::HorizonReached);
        assert_eq!(tr.final_time(), 1.0);
        assert!((tr.final_state()[0] - (-1.0f64).exp()).abs() < 1e-6);
        assert_eq!(tr.states[0], vec![1.0]);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn pure_drift() {
        let s = sys("0", 0.25);
        let tr = integrate(
            &s,
            &[0.0],
            &DisturbancePolicy::Constant(vec![0.25]),
            &IntegrationSettings::new(1e-3, 2.0),
        )
        .unwrap();
        assert!((tr.final_state()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn example_rhs_diverges_above_the_equilibrium() {
        let s = sys("-x + x^2", 0.25);
        let tr = integrate(
            &s,
            &[0.6],
            &DisturbancePolicy::Constant(vec![0.25]),
            &IntegrationSettings::new(1e-3, 20.0),
        )
        .unwrap();
        assert!(tr.states.windows(2).all(|w| w[1][0] > w[0][0]));
        assert!(tr.states.iter().any(|x| x[0] > 1.0));
        // x' = (x - 1/2)^2 from 0.6 blows up at t = 10.
        assert_eq!(tr.termination, Termination::BlowUp);
        assert!(tr.final_time() < 10.5);
    }

    #[test]
    fn constant_disturbance_shifts_the_equilibrium() {
        let s = sys("-x", 0.5);
        let tr = integrate(
            &s,
            &[0.0],
            &DisturbancePolicy::Constant(vec![0.5]),
            &IntegrationSettings::new(1e-2, 30.0),
        )
        .unwrap();
        assert!((tr.final_state()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_delta_collapses_the_ensemble() {
        let s = sys("-x + x^2", 0.0);
        let battery = default_policy_battery(&s, 4, 7, 0.1, &[]).unwrap();
        let runs = ensemble(&s, &[-1.0], &battery, &IntegrationSettings::new(1e-3, 3.0)).unwrap();
        let first = runs[0].as_ref().unwrap();
        for r in &runs {
            let r = r.as_ref().unwrap();
            assert_eq!(r.states, first.states);
            assert_eq!(r.max_disturbance(), 0.0);
        }
    }

    #[test]
    fn battery_sizes() {
        let s1 = sys("-x", 0.3);
        let b = default_policy_battery(&s1, 0, 1, 0.1, &[]).unwrap();
        assert_eq!(b.len(), 3);
        assert!(matches!(&b[1], DisturbancePolicy::Constant(d) if d == &vec![0.3]));
        assert!(matches!(&b[2], DisturbancePolicy::Constant(d) if d == &vec![-0.3]));
        let s2 = PerturbedSystem::new(
            VectorField::parse(&["-x", "-y"], &["x", "y"]).unwrap(),
            0.3,
        )
        .unwrap();
        assert_eq!(default_policy_battery(&s2, 0, 1, 0.1, &[]).unwrap().len(), 9);
        assert_eq!(constant_policy_count(2), 9);
        assert_eq!(default_policy_battery(&s2, 5, 1, 0.1, &[]).unwrap().len(), 14);
        let g = ScalarField::parse("x^2 + y^2", &["x", "y"]).unwrap();
        let with_set = default_policy_battery(&s2, 0, 1, 0.1, &[("A".into(), g)]).unwrap();
        assert_eq!(with_set.len(), 11);
    }

    #[test]
    fn random_policies_are_admissible_and_deterministic() {
        let s = PerturbedSystem::new(
            VectorField::parse(&["-x + y", "-y"], &["x", "y"]).unwrap(),
            0.4,
        )
        .unwrap();
        let battery = default_policy_battery(&s, 6, 99, 0.05, &[]).unwrap();
        let set = IntegrationSettings::new(1e-2, 2.0);
        for p in &battery {
            let a = integrate(&s, &[0.3, -0.2], p, &set).unwrap();
            let b = integrate(&s, &[0.3, -0.2], p, &set).unwrap();
            assert!(a.max_disturbance() <= 0.4 + 1e-12);
            for (x, y) in a.states.iter().zip(&b.states) {
                assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
            }
        }
    }

    #[test]
    fn feedback_policy_pushes_along_the_gradient() {
        let s = PerturbedSystem::new(VectorField::parse(&["0", "0"], &["x", "y"]).unwrap(), 0.5)
            .unwrap();
        let g = ScalarField::parse("x^2 + y^2", &["x", "y"]).unwrap();
        let p = DisturbancePolicy::gradient_feedback("g", &g, 1.0);
        let tr = integrate(&s, &[3.0, 4.0], &p, &IntegrationSettings::new(1e-2, 2.0)).unwrap();
        let r: f64 = tr.final_state().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r - 6.0).abs() < 1e-9);
        assert!(tr.max_disturbance() <= 0.5 + 1e-12);
    }

    #[test]
    fn nan_state_terminates_as_blow_up() {
        let s = sys("sqrt(x)", 0.0);
        let tr = integrate(&s, &[-1.0], &DisturbancePolicy::Zero, &IntegrationSettings::new(0.1, 1.0))
            .unwrap();
        assert_eq!(tr.termination, Termination::BlowUp);
        assert_eq!(tr.states.len(), 1);
    }

    #[test]
    fn leaving_the_domain_is_recorded() {
        let s = sys("1", 0.0);
        let mut set = IntegrationSettings::new(1e-2, 5.0);
        set.domain = Some(BoxSet::interval(-1.0, 1.0).unwrap());
        let tr = integrate(&s, &[0.0], &DisturbancePolicy::Zero, &set).unwrap();
        assert_eq!(tr.termination, Termination::LeftDomain);
        assert!(tr.final_state()[0] > 1.0 && tr.final_time() < 1.1);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            PerturbedSystem::new(VectorField::parse(&["x"], &["x"]).unwrap(), -0.1),
            Err(DynamicsError::BadDelta(_))
        ));
        let s = sys("-x", 0.0);
        assert!(integrate(&s, &[0.0], &DisturbancePolicy::Zero, &IntegrationSettings::new(2.0, 1.0)).is_err());
        assert!(integrate(&s, &[f64::NAN], &DisturbancePolicy::Zero, &IntegrationSettings::new(0.1, 1.0)).is_err());
        assert_eq!(
            ensemble(&s, &[0.0], &[], &IntegrationSettings::new(0.1, 1.0)).unwrap_err(),
            DynamicsError::NoPolicies
        );
    }
}
