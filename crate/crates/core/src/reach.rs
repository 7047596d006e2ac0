//! Sampled reachability: reach tubes, forward invariance, the maximal
//! invariant subset of a target, winning sets, the reach-avoid-stay and
//! stability-with-safety checks, and uniform asymptotic stability probes.
//!
//! Every "for all disturbances" quantifier is evaluated against a finite
//! policy battery. A `no` verdict comes with a concrete trajectory and is a
//! real counterexample up to integration error; a `yes` is sampled evidence
//! only, and is reported as `yes_sampled`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{
    DisturbancePolicy, DynamicsError, IntegrationSettings, PerturbedSystem, Stepper, Termination,
};
use crate::geometry::{BoxSet, GeometryError, Grid, SetSpec};

/// Fraction of the horizon at the end of a run during which a trajectory
/// must remain in the target to count as settled.
pub const SETTLE_FRACTION: f64 = 0.25;

/// Default number of integration steps between candidate-membership checks
/// in [`Sweep::maximal_invariant`].
pub const DEFAULT_CHECK_STRIDE: usize = 10;

const MAX_REPORTED: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReachError {
    #[error("{0} contains no grid points; refine the grid")]
    NoGridPoints(&'static str),
    #[error("{0} must be compact")]
    NotCompact(&'static str),
    #[error("A and U intersect on the grid")]
    TargetMeetsUnsafe,
    #[error("epsilon schedule must be nonempty and positive")]
    BadSchedule,
    #[error("time window [{0}, {1}] is invalid")]
    BadWindow(f64, f64),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    /// Union of cells visited by battery trajectories.
    SampledUnder,
    /// Sampled tube dilated by a Lipschitz growth bound; heuristic.
    LipschitzOver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Satisfied {
    YesSampled,
    No,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    EnteredUnsafe,
    LeftSet,
    LeftEpsilonBall,
    NotSettled,
    BlowUp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub x0: Vec<f64>,
    pub policy: String,
    pub time: f64,
    pub kind: ViolationKind,
    /// State farthest from the reference set along the run.
    pub peak_state: Vec<f64>,
    pub peak_distance: f64,
}

fn sort_and_truncate(list: &mut Vec<Counterexample>) -> usize {
    list.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then_with(|| b.peak_distance.total_cmp(&a.peak_distance))
            .then_with(|| a.x0.partial_cmp(&b.x0).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.policy.cmp(&b.policy))
    });
    let total = list.len();
    list.truncate(MAX_REPORTED);
    total
}

#[derive(Debug, Clone, Serialize)]
pub struct ReachResult {
    #[serde(skip)]
    pub grid: Grid,
    pub mask: Vec<bool>,
    pub horizon: (f64, f64),
    pub semantics: Semantics,
    pub boundary_exit: bool,
    pub start_points: usize,
    /// Lipschitz estimate used for the dilation (over semantics only).
    pub lipschitz: Option<f64>,
}

impl ReachResult {
    pub fn marked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceVerdict {
    pub satisfied: Satisfied,
    pub semantics: &'static str,
    pub start_points: usize,
    pub escapes: Vec<Counterexample>,
    pub escape_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantSet {
    #[serde(skip)]
    pub mask: Vec<bool>,
    pub iterations: usize,
    pub cells: usize,
    pub empty: bool,
    /// Extent of the mask in cell-center coordinates.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WinningSet {
    #[serde(skip)]
    pub mask: Vec<bool>,
    pub satisfied: Satisfied,
    pub conv_radius: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    ReachAvoidStay,
    StabilityWithSafety,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpecVerdict {
    pub spec: SpecKind,
    pub satisfied: Satisfied,
    pub semantics: &'static str,
    pub witness_t: Option<f64>,
    pub counterexamples: Vec<Counterexample>,
    pub counterexample_count: usize,
    pub start_points: usize,
    /// Componentwise minimum and maximum over all sampled states.
    pub state_min: Vec<f64>,
    pub state_max: Vec<f64>,
    pub probe: Option<UasProbeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "counterexample")]
pub enum UasVerdict {
    ConsistentWithUas,
    Violated(Counterexample),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UasProbeReport {
    /// `(ε, δ_ε)` pairs, δ_ε nondecreasing in ε.
    pub eps_table: Vec<(f64, f64)>,
    pub rho: f64,
    /// `(ε, T(ε))` pairs, T nonincreasing in ε; `None` when some run has
    /// not settled within ε by the start of the settle window.
    pub attractivity: Vec<(f64, Option<f64>)>,
    pub verdict: UasVerdict,
    pub counterexamples: Vec<Counterexample>,
    pub semantics: &'static str,
}

impl UasProbeReport {
    pub fn consistent(&self) -> bool {
        matches!(self.verdict, UasVerdict::ConsistentWithUas)
    }
}

/// Shared inputs of a grid sweep.
#[derive(Debug, Clone)]
pub struct Sweep<'a> {
    pub sys: &'a PerturbedSystem,
    pub grid: &'a Grid,
    pub battery: &'a [DisturbancePolicy],
    /// Step size and blow-up bound; the horizon is set per operation.
    pub settings: IntegrationSettings,
}

/// How a visitor ended a run.
enum RunEnd {
    Finished(Termination),
    Stopped,
}

/// Integrates one run and feeds `(t, x)` for the initial state and every
/// step to `visit`, which returns `false` to stop early.
fn run_visit<F: FnMut(f64, &[f64]) -> bool>(
    sys: &PerturbedSystem,
    x0: &[f64],
    policy: &DisturbancePolicy,
    settings: &IntegrationSettings,
    mut visit: F,
) -> Result<RunEnd, DynamicsError> {
    let mut st = Stepper::new(sys, x0, policy, settings)?;
    if !visit(0.0, x0) {
        return Ok(RunEnd::Stopped);
    }
    while st.advance() {
        if !visit(st.time(), st.state()) {
            return Ok(RunEnd::Stopped);
        }
    }
    Ok(RunEnd::Finished(
        st.termination().unwrap_or(Termination::BlowUp),
    ))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Points at distance exactly `r` from a box (face centers and corners
/// pushed outward), or approximately `r` for other compact sets.
fn shell_points(a: &SetSpec, r: f64, grid: &Grid) -> Vec<Vec<f64>> {
    if let SetSpec::Box(b) = a {
        return box_shell(b, r);
    }
    let tol = 0.5 * grid.max_width();
    let mut p = vec![0.0; grid.dim()];
    (0..grid.len())
        .filter_map(|i| {
            grid.point_into(i, &mut p);
            ((a.dist_raw(&p) - r).abs() <= tol).then(|| p.clone())
        })
        .collect()
}

fn box_shell(b: &BoxSet, r: f64) -> Vec<Vec<f64>> {
    let n = b.dim();
    let center = b.center();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut lo = center.clone();
        lo[i] = b.lo()[i] - r;
        let mut hi = center.clone();
        hi[i] = b.hi()[i] + r;
        out.push(lo);
        out.push(hi);
    }
    if n >= 2 {
        let s = r / (n as f64).sqrt();
        for c in b.corners() {
            let p = c
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if *v == b.hi()[i] && b.hi()[i] != b.lo()[i] {
                        v + s
                    } else if *v == b.lo()[i] && b.hi()[i] != b.lo()[i] {
                        v - s
                    } else {
                        *v
                    }
                })
                .collect();
            out.push(p);
        }
    }
    out.dedup();
    out
}

impl<'a> Sweep<'a> {
    pub fn new(
        sys: &'a PerturbedSystem,
        grid: &'a Grid,
        battery: &'a [DisturbancePolicy],
        settings: IntegrationSettings,
    ) -> Self {
        Self {
            sys,
            grid,
            battery,
            settings,
        }
    }

    fn settings_for(&self, horizon: f64) -> Result<IntegrationSettings, ReachError> {
        let mut s = self.settings.with_horizon(horizon);
        s.domain = None;
        s.validate()?;
        Ok(s)
    }

    /// Grid points of `set` plus the corners of its boxes lying in the grid
    /// domain.
    fn start_points(&self, set: &SetSpec, name: &'static str) -> Result<Vec<Vec<f64>>, ReachError> {
        let mut pts: Vec<Vec<f64>> = self
            .grid
            .points_in(set)
            .into_iter()
            .map(|i| self.grid.point(i))
            .collect();
        if pts.is_empty() {
            return Err(ReachError::NoGridPoints(name));
        }
        for c in set.box_corners() {
            if self.grid.domain().contains(&c) && !pts.contains(&c) {
                pts.push(c);
            }
        }
        Ok(pts)
    }

    fn jobs(&self, starts: usize) -> Vec<(usize, usize)> {
        (0..starts)
            .flat_map(|s| (0..self.battery.len()).map(move |p| (s, p)))
            .collect()
    }

    /// Cells visited during `[t_lo, t_hi]` by battery trajectories from the
    /// grid points of `w`.
    pub fn reach_tube(
        &self,
        w: &SetSpec,
        t_lo: f64,
        t_hi: f64,
        semantics: Semantics,
    ) -> Result<ReachResult, ReachError> {
        if !(t_lo >= 0.0) || !(t_hi > t_lo) {
            return Err(ReachError::BadWindow(t_lo, t_hi));
        }
        let starts = self.start_points(w, "W")?;
        let settings = self.settings_for(t_hi)?;
        let grid = self.grid;
        let n = grid.dim();
        let visits: Vec<(Vec<usize>, bool)> = self
            .jobs(starts.len())
            .into_par_iter()
            .map(|(s, p)| {
                let mut cells = Vec::new();
                let mut exited = false;
                let mut last: Option<Vec<f64>> = None;
                let mut cur = vec![0.0; n];
                let mut prev = vec![0.0; n];
                let mut probe = vec![0.0; n];
                let _ = run_visit(self.sys, &starts[s], &self.battery[p], &settings, |t, x| {
                    if t + 1e-12 < t_lo {
                        return true;
                    }
                    match grid.locate(x) {
                        None => {
                            exited = true;
                            last = None;
                        }
                        Some(c) => {
                            grid.cell_coords(x, &mut cur);
                            if let Some(lp) = &last {
                                prev.copy_from_slice(lp);
                                let jump = cur
                                    .iter()
                                    .zip(&prev)
                                    .map(|(a, b)| (a - b).abs())
                                    .fold(0.0, f64::max);
                                if jump > 1.0 {
                                    let k = (2.0 * jump).ceil() as usize;
                                    for j in 1..k {
                                        let f = j as f64 / k as f64;
                                        for i in 0..n {
                                            let cc = prev[i] + f * (cur[i] - prev[i]);
                                            probe[i] = grid.domain().lo()[i] + cc * grid.widths()[i];
                                        }
                                        if let Some(mid) = grid.locate(&probe) {
                                            cells.push(mid);
                                        }
                                    }
                                }
                            }
                            if cells.last() != Some(&c) {
                                cells.push(c);
                            }
                            last = Some(cur.clone());
                        }
                    }
                    true
                })
                .map_err(ReachError::from);
                (cells, exited)
            })
            .collect();
        let mut mask = vec![false; grid.len()];
        let mut boundary_exit = false;
        for (cells, exited) in visits {
            boundary_exit |= exited;
            for c in cells {
                mask[c] = true;
            }
        }
        let mut lipschitz = None;
        if semantics == Semantics::LipschitzOver {
            let l = self.lipschitz_estimate(&mask);
            let radius = grid.cell_radius() * (l * t_hi).exp();
            mask = dilate(grid, &mask, radius);
            lipschitz = Some(l);
        }
        Ok(ReachResult {
            grid: grid.clone(),
            mask,
            horizon: (t_lo, t_hi),
            semantics,
            boundary_exit,
            start_points: starts.len(),
            lipschitz,
        })
    }

    /// Max Frobenius norm of the Jacobian of `f` over marked cells.
    fn lipschitz_estimate(&self, mask: &[bool]) -> f64 {
        let jac = self.sys.f().jacobian();
        let n = self.grid.dim();
        let mut p = vec![0.0; n];
        let mut row = vec![0.0; n];
        let mut best: f64 = 0.0;
        for (i, m) in mask.iter().enumerate() {
            if !*m {
                continue;
            }
            self.grid.point_into(i, &mut p);
            let mut s = 0.0;
            for r in &jac {
                r.eval_into(&p, &mut row);
                s += row.iter().map(|v| v * v).sum::<f64>();
            }
            if s.is_finite() {
                best = best.max(s.sqrt());
            }
        }
        best
    }

    /// Simulates the battery from every grid point of `s` and reports
    /// trajectories that leave `s`.
    pub fn check_invariance(
        &self,
        s: &SetSpec,
        horizon: f64,
    ) -> Result<InvarianceVerdict, ReachError> {
        let starts = self.start_points(s, "S")?;
        let settings = self.settings_for(horizon)?;
        let mut escapes: Vec<Counterexample> = self
            .jobs(starts.len())
            .into_par_iter()
            .filter_map(|(si, p)| {
                let x0 = &starts[si];
                let mut hit: Option<(f64, Vec<f64>)> = None;
                let mut peak = (0.0, x0.clone());
                let end = run_visit(self.sys, x0, &self.battery[p], &settings, |t, x| {
                    let d = s.dist_raw(x);
                    if d > peak.0 {
                        peak = (d, x.to_vec());
                    }
                    if !s.contains_raw(x) {
                        hit = Some((t, x.to_vec()));
                        return false;
                    }
                    true
                })
                .ok()?;
                let blow = matches!(end, RunEnd::Finished(Termination::BlowUp));
                let (time, kind) = match (&hit, blow) {
                    (Some((t, _)), _) => (*t, ViolationKind::LeftSet),
                    (None, true) => (horizon, ViolationKind::BlowUp),
                    (None, false) => return None,
                };
                Some(Counterexample {
                    x0: x0.clone(),
                    policy: self.battery[p].label(),
                    time,
                    kind,
                    peak_state: hit.map(|h| h.1).unwrap_or(peak.1),
                    peak_distance: peak.0,
                })
            })
            .collect();
        let escape_count = sort_and_truncate(&mut escapes);
        Ok(InvarianceVerdict {
            satisfied: if escape_count == 0 {
                Satisfied::YesSampled
            } else {
                Satisfied::No
            },
            semantics: "sampled",
            start_points: starts.len(),
            escapes,
            escape_count,
        })
    }

    /// Largest subset of the `omega` cells from which no battery trajectory
    /// leaves the candidate set: cells are pruned until a fixpoint, checking
    /// candidate membership every `check_stride` steps over `horizon`.
    pub fn maximal_invariant(
        &self,
        omega: &SetSpec,
        horizon: f64,
        check_stride: usize,
    ) -> Result<InvariantSet, ReachError> {
        let settings = self.settings_for(horizon)?;
        let stride = check_stride.max(1);
        let grid = self.grid;
        let mut candidate = grid.mask_of(omega);
        if !candidate.iter().any(|c| *c) {
            return Err(ReachError::NoGridPoints("Omega"));
        }
        let mut iterations = 0;
        loop {
            iterations += 1;
            let current: Vec<usize> = (0..grid.len()).filter(|&i| candidate[i]).collect();
            let removed: Vec<usize> = current
                .par_iter()
                .filter(|&&cell| {
                    let x0 = grid.point(cell);
                    self.battery.iter().any(|policy| {
                        let mut k = 0usize;
                        let mut left = false;
                        let end = run_visit(self.sys, &x0, policy, &settings, |t, x| {
                            k += 1;
                            if k.is_multiple_of(stride) || t >= horizon {
                                let inside = omega.contains_raw(x)
                                    && grid.locate(x).is_some_and(|c| candidate[c]);
                                if !inside {
                                    left = true;
                                    return false;
                                }
                            }
                            true
                        });
                        left || matches!(end, Ok(RunEnd::Finished(Termination::BlowUp)) | Err(_))
                    })
                })
                .copied()
                .collect();
            if removed.is_empty() {
                break;
            }
            for c in removed {
                candidate[c] = false;
            }
            if !candidate.iter().any(|c| *c) {
                break;
            }
        }
        let cells = candidate.iter().filter(|c| **c).count();
        let (lo, hi) = crate::geometry::mask_extent(grid, &candidate).unwrap_or_default();
        Ok(InvariantSet {
            mask: candidate,
            iterations,
            cells,
            empty: cells == 0,
            lo,
            hi,
        })
    }

    /// Classifies one start point against `(A, U)`: every battery run must
    /// avoid `U`, stay finite, and remain within `eps` of `A` during the
    /// final settle window. Returns the worst run's settle time or the first
    /// violation.
    fn classify_start(
        &self,
        x0: &[f64],
        a: &SetSpec,
        u: &SetSpec,
        eps: f64,
        settings: &IntegrationSettings,
    ) -> Result<f64, Counterexample> {
        let horizon = settings.horizon;
        let settle_start = (1.0 - SETTLE_FRACTION) * horizon;
        let mut worst_settle: f64 = 0.0;
        for policy in self.battery {
            let mut last_out: Option<f64> = None;
            let mut unsafe_at: Option<(f64, Vec<f64>)> = None;
            let mut peak = (0.0, x0.to_vec());
            let mut last_t = 0.0;
            let end = run_visit(self.sys, x0, policy, settings, |t, x| {
                last_t = t;
                let d = a.dist_raw(x);
                if d > peak.0 {
                    peak = (d, x.to_vec());
                }
                if u.contains_raw(x) {
                    unsafe_at = Some((t, x.to_vec()));
                    return false;
                }
                if d > eps {
                    last_out = Some(t);
                }
                true
            });
            let cex = |time: f64, kind: ViolationKind, peak_state: Vec<f64>| Counterexample {
                x0: x0.to_vec(),
                policy: policy.label(),
                time,
                kind,
                peak_state,
                peak_distance: peak.0,
            };
            if let Some((t, x)) = unsafe_at {
                return Err(cex(t, ViolationKind::EnteredUnsafe, x));
            }
            match end {
                Ok(RunEnd::Finished(Termination::HorizonReached)) => {}
                _ => return Err(cex(last_t, ViolationKind::BlowUp, peak.1.clone())),
            }
            match last_out {
                Some(t) if t >= settle_start => {
                    return Err(cex(t, ViolationKind::NotSettled, peak.1.clone()));
                }
                Some(t) => worst_settle = worst_settle.max(t + settings.dt),
                None => {}
            }
        }
        Ok(worst_settle)
    }

    /// Grid cells from which every battery trajectory avoids `u` and settles
    /// within `conv_radius` of `a`.
    pub fn winning_set(
        &self,
        a: &SetSpec,
        u: &SetSpec,
        horizon: f64,
        conv_radius: Option<f64>,
    ) -> Result<WinningSet, ReachError> {
        let grid = self.grid;
        let u_mask = grid.mask_of(u);
        if meets(grid, a, u) {
            return Err(ReachError::TargetMeetsUnsafe);
        }
        let eps = conv_radius.unwrap_or(2.0 * grid.cell_radius());
        let settings = self.settings_for(horizon)?;
        let results: Vec<Option<Result<f64, Counterexample>>> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                if u_mask[i] {
                    return None;
                }
                let x0 = grid.point(i);
                Some(self.classify_start(&x0, a, u, eps, &settings))
            })
            .collect();
        let mask: Vec<bool> = results
            .iter()
            .map(|r| matches!(r, Some(Ok(_))))
            .collect();
        let any_settled = mask.iter().any(|m| *m);
        let cells = mask.iter().filter(|m| **m).count();
        Ok(WinningSet {
            mask,
            satisfied: if any_settled {
                Satisfied::YesSampled
            } else {
                Satisfied::Inconclusive
            },
            conv_radius: eps,
            cells,
        })
    }

    /// Reach-avoid-stay check for `(W, U, Ω)`.
    pub fn check_ras(
        &self,
        w: &SetSpec,
        u: &SetSpec,
        omega: &SetSpec,
        horizon: f64,
    ) -> Result<SpecVerdict, ReachError> {
        let starts = self.start_points(w, "W")?;
        let settings = self.settings_for(horizon)?;
        let n = self.grid.dim();
        struct RunStats {
            witness: Option<f64>,
            cex: Option<Counterexample>,
            min: Vec<f64>,
            max: Vec<f64>,
        }
        let stats: Vec<RunStats> = self
            .jobs(starts.len())
            .into_par_iter()
            .map(|(si, p)| {
                let x0 = &starts[si];
                let mut min = vec![f64::INFINITY; n];
                let mut max = vec![f64::NEG_INFINITY; n];
                let mut last_out: Option<f64> = None;
                let mut unsafe_at: Option<(f64, Vec<f64>)> = None;
                let mut peak = (0.0, x0.clone());
                let mut last_t = 0.0;
                let end = run_visit(self.sys, x0, &self.battery[p], &settings, |t, x| {
                    last_t = t;
                    for i in 0..n {
                        min[i] = min[i].min(x[i]);
                        max[i] = max[i].max(x[i]);
                    }
                    let d = omega.dist_raw(x);
                    if d > peak.0 {
                        peak = (d, x.to_vec());
                    }
                    if u.contains_raw(x) {
                        unsafe_at = Some((t, x.to_vec()));
                        return false;
                    }
                    if !omega.contains_raw(x) {
                        last_out = Some(t);
                    }
                    true
                });
                let cex = |time, kind, peak_state| {
                    Some(Counterexample {
                        x0: x0.clone(),
                        policy: self.battery[p].label(),
                        time,
                        kind,
                        peak_state,
                        peak_distance: peak.0,
                    })
                };
                let (witness, cex) = if let Some((t, x)) = unsafe_at.clone() {
                    (None, cex(t, ViolationKind::EnteredUnsafe, x))
                } else if !matches!(end, Ok(RunEnd::Finished(Termination::HorizonReached))) {
                    (None, cex(last_t, ViolationKind::BlowUp, peak.1.clone()))
                } else {
                    match last_out {
                        None => (Some(0.0), None),
                        Some(t) if t >= (1.0 - SETTLE_FRACTION) * horizon => {
                            (None, cex(t, ViolationKind::NotSettled, peak.1.clone()))
                        }
                        Some(t) => (Some(t + settings.dt), None),
                    }
                };
                RunStats {
                    witness,
                    cex,
                    min,
                    max,
                }
            })
            .collect();
        let mut state_min = vec![f64::INFINITY; n];
        let mut state_max = vec![f64::NEG_INFINITY; n];
        let mut witness: f64 = 0.0;
        let mut cexs = Vec::new();
        for s in stats {
            for i in 0..n {
                state_min[i] = state_min[i].min(s.min[i]);
                state_max[i] = state_max[i].max(s.max[i]);
            }
            if let Some(t) = s.witness {
                witness = witness.max(t);
            }
            if let Some(c) = s.cex {
                cexs.push(c);
            }
        }
        let hard = cexs.iter().any(|c| c.kind != ViolationKind::NotSettled);
        let satisfied = if hard {
            Satisfied::No
        } else if !cexs.is_empty() {
            Satisfied::Inconclusive
        } else {
            Satisfied::YesSampled
        };
        if hard {
            cexs.retain(|c| c.kind != ViolationKind::NotSettled);
        }
        let count = sort_and_truncate(&mut cexs);
        Ok(SpecVerdict {
            spec: SpecKind::ReachAvoidStay,
            satisfied,
            semantics: "sampled",
            witness_t: (satisfied == Satisfied::YesSampled).then_some(witness),
            counterexamples: cexs,
            counterexample_count: count,
            start_points: starts.len(),
            state_min,
            state_max,
            probe: None,
        })
    }

    /// Stability-with-safety check for `(W, U, A)`: a UAS probe on `A`
    /// combined with `W` lying in the sampled winning set.
    pub fn check_sws(
        &self,
        w: &SetSpec,
        u: &SetSpec,
        a: &SetSpec,
        horizon: f64,
        probe: &ProbeSettings,
    ) -> Result<SpecVerdict, ReachError> {
        let grid = self.grid;
        if meets(grid, a, u) {
            return Err(ReachError::TargetMeetsUnsafe);
        }
        let report = self.probe_uas(a, probe)?;
        let starts = self.start_points(w, "W")?;
        let settings = self.settings_for(horizon)?;
        let eps = probe
            .conv_radius
            .unwrap_or(2.0 * grid.cell_radius());
        let outcomes: Vec<Result<f64, Counterexample>> = starts
            .par_iter()
            .map(|x0| self.classify_start(x0, a, u, eps, &settings))
            .collect();
        let mut witness: f64 = 0.0;
        let mut cexs = Vec::new();
        for o in outcomes {
            match o {
                Ok(t) => witness = witness.max(t),
                Err(c) => cexs.push(c),
            }
        }
        let mut satisfied = if cexs.iter().any(|c| c.kind != ViolationKind::NotSettled) {
            Satisfied::No
        } else if !cexs.is_empty() {
            Satisfied::Inconclusive
        } else {
            Satisfied::YesSampled
        };
        if let UasVerdict::Violated(c) = &report.verdict {
            satisfied = Satisfied::No;
            cexs.insert(0, c.clone());
        }
        if satisfied == Satisfied::No {
            cexs.retain(|c| c.kind != ViolationKind::NotSettled || !report.consistent());
        }
        let count = cexs.len();
        cexs.truncate(MAX_REPORTED);
        Ok(SpecVerdict {
            spec: SpecKind::StabilityWithSafety,
            satisfied,
            semantics: "sampled",
            witness_t: (satisfied == Satisfied::YesSampled).then_some(witness),
            counterexamples: cexs,
            counterexample_count: count,
            start_points: starts.len(),
            state_min: Vec::new(),
            state_max: Vec::new(),
            probe: Some(report),
        })
    }

    /// Probes uniform stability (bisection for δ_ε per ε) and uniform
    /// attractivity (settling times from `A + ρB`) of the compact set `a`.
    pub fn probe_uas(
        &self,
        a: &SetSpec,
        probe: &ProbeSettings,
    ) -> Result<UasProbeReport, ReachError> {
        if a.bounding_box().is_none() {
            return Err(ReachError::NotCompact("A"));
        }
        let mut schedule = probe.eps_schedule.clone();
        if schedule.is_empty() || schedule.iter().any(|e| !(*e > 0.0)) {
            return Err(ReachError::BadSchedule);
        }
        schedule.sort_by(f64::total_cmp);
        schedule.dedup();
        let mut settings = self.settings_for(probe.horizon)?;
        if let Some(dt) = probe.dt {
            settings.dt = dt;
            settings.validate()?;
        }
        let mut counterexamples = Vec::new();

        // Uniform stability.
        let mut eps_table = Vec::with_capacity(schedule.len());
        let mut running: f64 = 0.0;
        for &eps in &schedule {
            let floor = probe.min_radius_fraction * eps;
            let d_eps = match self.stays_within(a, eps, eps, &settings) {
                None => eps,
                Some(_) => match self.stays_within(a, floor, eps, &settings) {
                    Some(c) => {
                        counterexamples.push(c);
                        0.0
                    }
                    None => {
                        let (mut lo, mut hi) = (floor, eps);
                        for _ in 0..probe.bisection_steps {
                            let mid = 0.5 * (lo + hi);
                            if self.stays_within(a, mid, eps, &settings).is_none() {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        lo
                    }
                },
            };
            running = running.max(d_eps);
            eps_table.push((eps, running));
        }

        // Uniform attractivity.
        let mut starts: Vec<Vec<f64>> = Vec::new();
        for k in 0..=4 {
            starts.extend(shell_points(a, probe.rho * k as f64 / 4.0, self.grid));
        }
        let inside = self.grid.points_in(a);
        let stride = (inside.len() / 64).max(1);
        starts.extend(inside.iter().step_by(stride).map(|&i| self.grid.point(i)));
        let horizon = probe.horizon;
        let settle_start = (1.0 - SETTLE_FRACTION) * horizon;
        let runs: Vec<Result<Vec<f64>, Counterexample>> = self
            .jobs(starts.len())
            .into_par_iter()
            .map(|(si, p)| {
                let x0 = &starts[si];
                let mut last_out: Vec<Option<f64>> = vec![None; schedule.len()];
                let mut peak = (0.0, x0.clone());
                let mut last_t = 0.0;
                let end = run_visit(self.sys, x0, &self.battery[p], &settings, |t, x| {
                    last_t = t;
                    let d = a.dist_raw(x);
                    if d > peak.0 || !d.is_finite() {
                        peak = (d, x.to_vec());
                    }
                    for (k, e) in schedule.iter().enumerate() {
                        if d > *e {
                            last_out[k] = Some(t);
                        }
                    }
                    true
                });
                let cex = |time, kind| Counterexample {
                    x0: x0.clone(),
                    policy: self.battery[p].label(),
                    time,
                    kind,
                    peak_state: peak.1.clone(),
                    peak_distance: peak.0,
                };
                if !matches!(end, Ok(RunEnd::Finished(Termination::HorizonReached))) {
                    return Err(cex(last_t, ViolationKind::BlowUp));
                }
                // The loosest tolerance decides settling; tighter ones only
                // refine T(ε).
                let widest = schedule.len() - 1;
                if let Some(t) = last_out[widest] {
                    if t >= settle_start {
                        return Err(cex(t, ViolationKind::NotSettled));
                    }
                }
                Ok(last_out
                    .iter()
                    .map(|o| o.map_or(0.0, |t| t + settings.dt))
                    .collect())
            })
            .collect();
        let mut times = vec![0.0f64; schedule.len()];
        for r in runs {
            match r {
                Ok(ts) => {
                    for (acc, t) in times.iter_mut().zip(ts) {
                        *acc = acc.max(t);
                    }
                }
                Err(c) => counterexamples.push(c),
            }
        }
        let mut attractivity = Vec::with_capacity(schedule.len());
        let mut best = f64::INFINITY;
        for (e, t) in schedule.iter().zip(times) {
            if t < settle_start {
                best = best.min(t);
            }
            attractivity.push((*e, best.is_finite().then_some(best)));
        }
        counterexamples.sort_by(|a, b| {
            b.peak_distance
                .total_cmp(&a.peak_distance)
                .then_with(|| a.time.total_cmp(&b.time))
        });
        counterexamples.truncate(MAX_REPORTED);
        let verdict = match counterexamples.first() {
            Some(c) => UasVerdict::Violated(c.clone()),
            None => UasVerdict::ConsistentWithUas,
        };
        Ok(UasProbeReport {
            eps_table,
            rho: probe.rho,
            attractivity,
            verdict,
            counterexamples,
            semantics: "sampled",
        })
    }

    /// `None` if every battery run from the radius-`r` shell of `a` stays
    /// within distance `eps` of `a`; otherwise the first violation.
    fn stays_within(
        &self,
        a: &SetSpec,
        r: f64,
        eps: f64,
        settings: &IntegrationSettings,
    ) -> Option<Counterexample> {
        let shell = shell_points(a, r, self.grid);
        self.jobs(shell.len())
            .into_par_iter()
            .filter_map(|(si, p)| {
                let x0 = &shell[si];
                let mut hit: Option<(f64, Vec<f64>, f64)> = None;
                let end = run_visit(self.sys, x0, &self.battery[p], settings, |t, x| {
                    let d = a.dist_raw(x);
                    if !(d <= eps) {
                        hit = Some((t, x.to_vec(), d));
                        return false;
                    }
                    true
                });
                let (time, state, d, kind) = match (hit, end) {
                    (Some((t, x, d)), _) => (t, x, d, ViolationKind::LeftEpsilonBall),
                    (None, Ok(RunEnd::Finished(Termination::HorizonReached))) => return None,
                    (None, _) => (settings.horizon, x0.clone(), f64::INFINITY, ViolationKind::BlowUp),
                };
                Some(Counterexample {
                    x0: x0.clone(),
                    policy: self.battery[p].label(),
                    time,
                    kind,
                    peak_state: state,
                    peak_distance: d,
                })
            })
            .min_by(|a, b| a.time.total_cmp(&b.time))
    }
}

/// Parameters of [`Sweep::probe_uas`] and the settle radius of
/// [`Sweep::check_sws`].
#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub eps_schedule: Vec<f64>,
    pub rho: f64,
    pub horizon: f64,
    pub bisection_steps: usize,
    /// Step size for the probe runs; defaults to the sweep's.
    pub dt: Option<f64>,
    /// Smallest δ_ε tried, as a fraction of ε; failing there means no δ_ε.
    pub min_radius_fraction: f64,
    pub conv_radius: Option<f64>,
}

impl ProbeSettings {
    pub fn new(eps_schedule: Vec<f64>, rho: f64, horizon: f64) -> Self {
        Self {
            eps_schedule,
            rho,
            horizon,
            bisection_steps: 20,
            dt: None,
            min_radius_fraction: 1e-3,
            conv_radius: None,
        }
    }
}

/// Whether `a` and `u` share a grid point or a box corner of `a`.
fn meets(grid: &Grid, a: &SetSpec, u: &SetSpec) -> bool {
    let mut p = vec![0.0; grid.dim()];
    let on_grid = (0..grid.len()).any(|i| {
        grid.point_into(i, &mut p);
        a.contains_raw(&p) && u.contains_raw(&p)
    });
    on_grid || a.box_corners().iter().any(|c| u.contains_raw(c))
}

/// Marks every cell within Euclidean distance `radius` of a marked cell.
pub fn dilate(grid: &Grid, mask: &[bool], radius: f64) -> Vec<bool> {
    let diameter = grid
        .domain()
        .lo()
        .iter()
        .zip(grid.domain().hi())
        .map(|(l, h)| (h - l).powi(2))
        .sum::<f64>()
        .sqrt();
    if !mask.iter().any(|m| *m) {
        return mask.to_vec();
    }
    if !(radius < diameter) {
        return vec![true; grid.len()];
    }
    let n = grid.dim();
    let reach: Vec<isize> = grid
        .widths()
        .iter()
        .map(|w| (radius / w).ceil() as isize)
        .collect();
    let mut out = mask.to_vec();
    let mut offsets: Vec<Vec<isize>> = vec![vec![]];
    for r in &reach {
        offsets = offsets
            .into_iter()
            .flat_map(|o| {
                (-*r..=*r).map(move |k| {
                    let mut v = o.clone();
                    v.push(k);
                    v
                })
            })
            .collect();
    }
    offsets.retain(|o| {
        o.iter()
            .zip(grid.widths())
            .map(|(k, w)| {
                let gap = ((k.unsigned_abs() as f64) - 1.0).max(0.0) * w;
                gap * gap
            })
            .sum::<f64>()
            .sqrt()
            <= radius
    });
    for (i, m) in mask.iter().enumerate() {
        if !*m {
            continue;
        }
        let base = grid.multi_index(i);
        'o: for o in &offsets {
            let mut idx = vec![0usize; n];
            for k in 0..n {
                let v = base[k] as isize + o[k];
                if v < 0 || v >= grid.counts()[k] as isize {
                    continue 'o;
                }
                idx[k] = v as usize;
            }
            out[grid.flat_index(&idx)] = true;
        }
    }
    out
}

/// Cell-center norm helper for reports.
pub fn max_norm(points: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| norm(p)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::default_policy_battery;
    use crate::expr::VectorField;

    fn sys(f: &str, delta: f64) -> PerturbedSystem {
        PerturbedSystem::new(VectorField::parse(&[f], &["x"]).unwrap(), delta).unwrap()
    }

    fn interval(lo: f64, hi: f64) -> SetSpec {
        SetSpec::Box(BoxSet::interval(lo, hi).unwrap())
    }

    fn grid(lo: f64, hi: f64, h: f64) -> Grid {
        Grid::new(BoxSet::interval(lo, hi).unwrap(), h).unwrap()
    }

    fn battery(s: &PerturbedSystem, n_random: usize) -> Vec<DisturbancePolicy> {
        default_policy_battery(s, n_random, 11, 0.1, &[]).unwrap()
    }

    fn cell_of(g: &Grid, x: f64) -> usize {
        g.locate(&[x]).unwrap()
    }

    #[test]
    fn stationary_flow_tube_is_one_cell() {
        let s = sys("0", 0.0);
        let g = grid(-1.05, 1.05, 0.1);
        let b = battery(&s, 2);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        let r = sw
            .reach_tube(&interval(0.0, 0.0), 0.0, 3.0, Semantics::SampledUnder)
            .unwrap();
        assert_eq!(r.marked(), 1);
        assert!(r.mask[cell_of(&g, 0.0)]);
    }

    #[test]
    fn drift_tube_covers_the_extremal_range() {
        let s = sys("0", 0.25);
        let g = grid(-1.005, 1.005, 0.01);
        let b = battery(&s, 0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-3, 1.0));
        let r = sw
            .reach_tube(&interval(0.0, 0.0), 0.0, 2.0, Semantics::SampledUnder)
            .unwrap();
        for k in -50..=50 {
            let x = k as f64 * 0.01;
            assert!(r.mask[cell_of(&g, x)], "{x}");
        }
        assert!(!r.mask[cell_of(&g, 0.52)]);
        let over = sw
            .reach_tube(&interval(0.0, 0.0), 0.0, 2.0, Semantics::LipschitzOver)
            .unwrap();
        assert!(r.mask.iter().zip(&over.mask).all(|(u, o)| !*u || *o));
    }

    #[test]
    fn empty_start_set_is_rejected() {
        let s = sys("-x", 0.0);
        let g = grid(-1.0, 1.0, 0.1);
        let b = battery(&s, 0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        assert_eq!(
            sw.reach_tube(&interval(5.0, 6.0), 0.0, 1.0, Semantics::SampledUnder)
                .unwrap_err(),
            ReachError::NoGridPoints("W")
        );
        assert!(sw
            .check_ras(&interval(5.0, 6.0), &interval(9.0, 10.0), &interval(-1.0, 1.0), 5.0)
            .is_err());
    }

    #[test]
    fn contraction_is_invariant() {
        let s = sys("-x", 0.0);
        let g = grid(-1.0, 1.0, 0.05);
        let b = battery(&s, 0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        let v = sw.check_invariance(&interval(-1.0, 1.0), 5.0).unwrap();
        assert_eq!(v.satisfied, Satisfied::YesSampled);
    }

    #[test]
    fn example_invariant_interval_and_its_escape() {
        let s = sys("-x + x^2", 0.25);
        let g = grid(-1.5, 1.5, 1e-3);
        let b = battery(&s, 4);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-3, 1.0));
        let a_lo = 0.5 - 0.5 * 2f64.sqrt();
        let ok = sw.check_invariance(&interval(a_lo, 0.5), 5.0).unwrap();
        assert_eq!(ok.satisfied, Satisfied::YesSampled, "{:?}", ok.escapes.first());
        let bad = sw.check_invariance(&interval(a_lo, 0.51), 5.0).unwrap();
        assert_eq!(bad.satisfied, Satisfied::No);
        let first = &bad.escapes[0];
        assert!((first.x0[0] - 0.51).abs() < 2e-3, "{first:?}");
        assert_eq!(first.policy, "constant[+0.25]");
    }

    #[test]
    fn maximal_invariant_examples() {
        // Contraction: the whole target survives.
        let s = sys("-x", 0.0);
        let g = grid(-1.05, 1.05, 0.1);
        let b = battery(&s, 0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        let omega = interval(-1.0, 1.0);
        let inv = sw.maximal_invariant(&omega, 5.0, DEFAULT_CHECK_STRIDE).unwrap();
        assert_eq!(inv.mask, g.mask_of(&omega));

        // Expansion: only the equilibrium cell survives.
        let s = sys("x", 0.0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        let inv = sw.maximal_invariant(&omega, 5.0, DEFAULT_CHECK_STRIDE).unwrap();
        assert_eq!(inv.cells, 1);
        assert!(inv.mask[cell_of(&g, 0.0)]);
        let v = sw.check_invariance(&interval(0.0, 0.0), 5.0).unwrap();
        assert_eq!(v.satisfied, Satisfied::YesSampled);
        let v = sw.check_invariance(&interval(-0.05, 0.05), 5.0).unwrap();
        assert_eq!(v.satisfied, Satisfied::No);
    }

    #[test]
    fn maximal_invariant_of_the_example_target() {
        // Every admissible velocity at x in [-0.25, -0.2071) is positive, so
        // nothing in Ω = [-0.25, 0.5] can leave: the fixpoint keeps all of Ω.
        let s = sys("-x + x^2", 0.25);
        let g = grid(-1.5, 1.5, 1e-3);
        let b = battery(&s, 4);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-3, 1.0));
        let inv = sw
            .maximal_invariant(&interval(-0.25, 0.5), 5.0, DEFAULT_CHECK_STRIDE)
            .unwrap();
        assert!((inv.lo[0] + 0.25).abs() <= 2e-3, "{:?}", inv.lo);
        assert!((inv.hi[0] - 0.5).abs() <= 2e-3, "{:?}", inv.hi);
        // Oracle: f(x) - δ at the left end.
        let f = |x: f64| -x + x * x;
        assert!(f(-0.25) - 0.25 > 0.0);
    }

    #[test]
    fn winning_set_of_a_global_contraction() {
        let s = sys("-x", 0.0);
        let g = grid(-1.5, 1.5, 0.05);
        let b = battery(&s, 0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        let u = interval(2.0, 3.0);
        let w = sw.winning_set(&interval(0.0, 0.0), &u, 20.0, None).unwrap();
        assert!(w.mask.iter().all(|m| *m));
        assert!(matches!(
            sw.winning_set(&interval(0.0, 0.0), &interval(-0.1, 0.1), 20.0, None),
            Err(ReachError::TargetMeetsUnsafe)
        ));
        // Cells inside U are never winning.
        let w2 = sw.winning_set(&interval(0.0, 0.0), &interval(1.0, 3.0), 20.0, None).unwrap();
        let um = g.mask_of(&interval(1.0, 3.0));
        assert!(w2.mask.iter().zip(&um).all(|(m, u)| !(*m && *u)));
        assert!(w2.mask[cell_of(&g, 0.9)]);
    }

    #[test]
    fn too_short_horizon_is_inconclusive() {
        let s = sys("-0.01*x", 0.0);
        let g = grid(0.5, 1.5, 0.25);
        let b = battery(&s, 0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        let w = sw
            .winning_set(&interval(0.0, 0.0), &interval(5.0, 6.0), 2.0, None)
            .unwrap();
        assert_eq!(w.satisfied, Satisfied::Inconclusive);
        assert_eq!(w.cells, 0);
    }

    #[test]
    fn linear_uas_probe_recovers_delta_eps_equal_eps() {
        let s = sys("-x", 0.0);
        let g = grid(-1.05, 1.05, 0.01);
        let b = battery(&s, 0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        let r = sw
            .probe_uas(&interval(0.0, 0.0), &ProbeSettings::new(vec![0.05, 0.1, 0.2], 0.5, 20.0))
            .unwrap();
        assert!(r.consistent());
        for (e, d) in &r.eps_table {
            assert!((d - e).abs() <= g.cell_radius(), "{e} {d}");
        }
        assert!(r.attractivity.windows(2).all(|w| w[1].1 <= w[0].1));
        // |x0| e^{-T} = ε at the worst start ρ = 0.5.
        let (e, t) = r.attractivity[0];
        let t = t.unwrap();
        assert!((t - (0.5f64 / e).ln()).abs() < 0.05, "{t}");
    }

    #[test]
    fn sws_on_linear_contraction() {
        let s = sys("-x", 0.0);
        let g = grid(-1.5, 1.5, 0.05);
        let b = battery(&s, 0);
        let sw = Sweep::new(&s, &g, &b, IntegrationSettings::new(1e-2, 1.0));
        let v = sw
            .check_sws(
                &interval(-1.0, 1.0),
                &interval(2.0, 3.0),
                &interval(0.0, 0.0),
                20.0,
                &ProbeSettings::new(vec![0.1, 0.2], 0.5, 20.0),
            )
            .unwrap();
        assert_eq!(v.satisfied, Satisfied::YesSampled);
        assert!(v.witness_t.is_some());
    }

    #[test]
    fn dilation_is_monotone() {
        let g = grid(0.0, 1.0, 0.1);
        let mut m = vec![false; g.len()];
        m[5] = true;
        let d = dilate(&g, &m, 0.15);
        assert_eq!(d.iter().filter(|x| **x).count(), 5);
        assert!(dilate(&g, &m, 10.0).iter().all(|x| *x));
    }
}
