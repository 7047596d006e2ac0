//! Sets, distances, cell-centered grids and the proper indicator.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{ExprError, ScalarField};

/// Default maximum number of grid points.
pub const DEFAULT_GRID_CAP: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: set has dimension {expected}, point has {got}")]
    Dimension { expected: usize, got: usize },
    #[error("box bounds invalid on axis {axis}: lo {lo} > hi {hi}")]
    InvalidBox { axis: usize, lo: f64, hi: f64 },
    #[error("set is empty")]
    EmptySet,
    #[error("grid domain must be a bounded box with positive width")]
    UnboundedDomain,
    #[error("grid resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("grid would have {points} points (cap {cap}); use a resolution of at least {min_resolution:.3e}")]
    GridTooLarge {
        points: f64,
        cap: usize,
        min_resolution: f64,
    },
    #[error("A must be compact (bounded)")]
    NotCompact,
    #[error("A is not contained in the interior of D (dist(A, complement of D) = {0})")]
    NotInside(f64),
    #[error("unsupported set kind for {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Axis-aligned box `[lo, hi]`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, GeometryError> {
        if lo.len() != hi.len() {
            return Err(GeometryError::Dimension {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for (axis, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if l.is_nan() || h.is_nan() || l > h {
                return Err(GeometryError::InvalidBox { axis, lo: l, hi: h });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self, GeometryError> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn point(p: Vec<f64>) -> Self {
        Self {
            lo: p.clone(),
            hi: p,
        }
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Euclidean distance by componentwise clamping.
    #[inline]
    pub fn dist(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (v, (l, h)) in x.iter().zip(self.lo.iter().zip(&self.hi)) {
            let e = if v < l {
                l - v
            } else if v > h {
                v - h
            } else {
                0.0
            };
            s += e * e;
        }
        s.sqrt()
    }

    /// Distance from `x` to the complement of the box; zero outside.
    #[inline]
    pub fn depth(&self, x: &[f64]) -> f64 {
        let mut m = f64::INFINITY;
        for (v, (l, h)) in x.iter().zip(self.lo.iter().zip(&self.hi)) {
            m = m.min(v - l).min(h - v);
        }
        m.max(0.0)
    }

    /// All `2^n` corners (bounded boxes only).
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.hi[i]
                        } else {
                            self.lo[i]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }
}

/// A region of state space.
#[derive(Debug, Clone, PartialEq)]
pub enum SetSpec {
    Box(BoxSet),
    /// `{x : g(x) <= level}`.
    Sublevel { g: ScalarField, level: f64 },
    Union(Vec<SetSpec>),
    /// Closure of the complement of a box, e.g. `{|x| >= 2}`.
    BoxComplement(BoxSet),
}

/// A distance value and whether it is exact or a numerical estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distance {
    pub value: f64,
    pub exact: bool,
}

impl SetSpec {
    pub fn dim(&self) -> Option<usize> {
        match self {
            SetSpec::Box(b) | SetSpec::BoxComplement(b) => Some(b.dim()),
            SetSpec::Sublevel { g, .. } => Some(g.dim()),
            SetSpec::Union(parts) => parts.first().and_then(SetSpec::dim),
        }
    }

    /// Membership without dimension checking (hot path).
    #[inline]
    pub fn contains_raw(&self, x: &[f64]) -> bool {
        match self {
            SetSpec::Box(b) => b.contains(x),
            SetSpec::Sublevel { g, level } => g.eval_raw(x) <= *level,
            SetSpec::Union(parts) => parts.iter().any(|p| p.contains_raw(x)),
            SetSpec::BoxComplement(b) => b.depth(x) <= 0.0,
        }
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool, GeometryError> {
        self.check_dim(x)?;
        Ok(self.contains_raw(x))
    }

    /// True when `dist` and membership are exact for this set.
    pub fn is_exact(&self) -> bool {
        match self {
            SetSpec::Box(_) | SetSpec::BoxComplement(_) => true,
            SetSpec::Sublevel { .. } => false,
            SetSpec::Union(parts) => parts.iter().all(SetSpec::is_exact),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, SetSpec::Union(parts) if parts.iter().all(SetSpec::is_empty))
    }

    /// `inf_{y in S} |x - y|`.
    pub fn dist(&self, x: &[f64]) -> Result<Distance, GeometryError> {
        self.check_dim(x)?;
        if self.is_empty() {
            return Err(GeometryError::EmptySet);
        }
        Ok(Distance {
            value: self.dist_raw(x),
            exact: self.is_exact(),
        })
    }

    pub fn dist_raw(&self, x: &[f64]) -> f64 {
        match self {
            SetSpec::Box(b) => b.dist(x),
            SetSpec::BoxComplement(b) => b.depth(x),
            SetSpec::Union(parts) => parts
                .iter()
                .filter(|p| !p.is_empty())
                .map(|p| p.dist_raw(x))
                .fold(f64::INFINITY, f64::min),
            SetSpec::Sublevel { g, level } => {
                if g.eval_raw(x) <= *level {
                    0.0
                } else {
                    level_set_distance(g, *level, x, Side::Below)
                }
            }
        }
    }

    /// Distance from `x` to the complement of the set (zero when `x` is
    /// outside). Used for open sets given by their closure.
    pub fn depth(&self, x: &[f64]) -> Result<f64, GeometryError> {
        self.check_dim(x)?;
        match self {
            SetSpec::Union(_) => Err(GeometryError::Unsupported("depth of a union")),
            _ => Ok(self.depth_raw(x)),
        }
    }

    fn depth_raw(&self, x: &[f64]) -> f64 {
        match self {
            SetSpec::Box(b) => b.depth(x),
            SetSpec::BoxComplement(b) => b.dist(x),
            SetSpec::Sublevel { g, level } => {
                if g.eval_raw(x) > *level {
                    0.0
                } else {
                    level_set_distance(g, *level, x, Side::Above)
                }
            }
            SetSpec::Union(_) => f64::NAN,
        }
    }

    /// Membership in the interior, for open sets given by their closure.
    pub fn interior_contains(&self, x: &[f64]) -> bool {
        match self {
            SetSpec::Union(parts) => parts.iter().any(|p| p.interior_contains(x)),
            _ => self.depth_raw(x) > 0.0,
        }
    }

    /// Bounding box, if the set is bounded and the box is known.
    pub fn bounding_box(&self) -> Option<BoxSet> {
        match self {
            SetSpec::Box(b) => b.is_bounded().then(|| b.clone()),
            SetSpec::BoxComplement(_) | SetSpec::Sublevel { .. } => None,
            SetSpec::Union(parts) => {
                let boxes: Option<Vec<BoxSet>> = parts.iter().map(SetSpec::bounding_box).collect();
                let boxes = boxes?;
                let first = boxes.first()?;
                let mut lo = first.lo.clone();
                let mut hi = first.hi.clone();
                for b in &boxes[1..] {
                    for i in 0..lo.len() {
                        lo[i] = lo[i].min(b.lo[i]);
                        hi[i] = hi[i].max(b.hi[i]);
                    }
                }
                Some(BoxSet { lo, hi })
            }
        }
    }

    /// Corner points of every box in the set; used to add exact extreme
    /// points to grid samples.
    pub fn box_corners(&self) -> Vec<Vec<f64>> {
        match self {
            SetSpec::Box(b) if b.is_bounded() => b.corners(),
            SetSpec::Union(parts) => parts.iter().flat_map(SetSpec::box_corners).collect(),
            _ => Vec::new(),
        }
    }

    /// Scalar functions defining sublevel parts of the set.
    pub fn defining_functions(&self) -> Vec<&ScalarField> {
        match self {
            SetSpec::Sublevel { g, .. } => vec![g],
            SetSpec::Union(parts) => parts.iter().flat_map(SetSpec::defining_functions).collect(),
            _ => Vec::new(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), GeometryError> {
        match self.dim() {
            Some(d) if d != x.len() => Err(GeometryError::Dimension {
                expected: d,
                got: x.len(),
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy)]
enum Side {
    /// Target is `{g <= c}`.
    Below,
    /// Target is `{g >= c}`.
    Above,
}

/// Approximate distance from `x` to `{g <= c}` or `{g >= c}` when `x` lies on
/// the other side: Newton projection onto the level surface followed by
/// tangential descent toward `x`, from several starting offsets.
fn level_set_distance(g: &ScalarField, c: f64, x: &[f64], side: Side) -> f64 {
    let n = x.len();
    let grad = g.grad();
    let mut gbuf = vec![0.0; n];
    let mut project = |y: &mut Vec<f64>| -> bool {
        for _ in 0..100 {
            let r = g.eval_raw(y) - c;
            if !r.is_finite() {
                return false;
            }
            grad.eval_into(y, &mut gbuf);
            let g2: f64 = gbuf.iter().map(|v| v * v).sum();
            if g2 == 0.0 || !g2.is_finite() {
                return false;
            }
            for (yi, gi) in y.iter_mut().zip(&gbuf) {
                *yi -= r * gi / g2;
            }
            if r.abs() < 1e-13 * (1.0 + c.abs()) {
                break;
            }
        }
        true
    };
    let scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut starts: Vec<Vec<f64>> = vec![x.to_vec()];
    for i in 0..n {
        for s in [-1.0, 1.0] {
            let mut p = x.to_vec();
            p[i] += s * 0.25 * scale;
            starts.push(p);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..4 {
        starts.push(
            x.iter()
                .map(|v| v + rng.random_range(-0.5..0.5) * scale)
                .collect(),
        );
    }
    let mut best = f64::INFINITY;
    for mut y in starts {
        if !project(&mut y) {
            continue;
        }
        let mut normal = vec![0.0; n];
        for _ in 0..300 {
            grad.eval_into(&y, &mut normal);
            let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            let r: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
            let rn: f64 = r.iter().zip(&normal).map(|(a, b)| a * b).sum::<f64>() / norm;
            let mut moved = 0.0;
            for i in 0..n {
                let tang = r[i] - rn * normal[i] / norm;
                y[i] -= 0.5 * tang;
                moved += tang * tang;
            }
            if !project(&mut y) {
                break;
            }
            if moved.sqrt() < 1e-12 * scale {
                break;
            }
        }
        let val = g.eval_raw(&y);
        let ok = match side {
            Side::Below => val <= c + 1e-9 * (1.0 + c.abs()),
            Side::Above => val >= c - 1e-9 * (1.0 + c.abs()),
        };
        if ok {
            let d = y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Remark-7 style proper indicator
/// `omega(x) = max(|x|_A, 1/|x|_{R^n \ D} - 2 / dist(A, R^n \ D))`
/// for compact `A` inside the open set `D` (given by its closure; boundary
/// points count as outside). Without `D` the indicator is `|x|_A`.
#[derive(Debug, Clone)]
pub struct ProperIndicator {
    a: SetSpec,
    d: Option<SetSpec>,
    dist_a_to_dc: f64,
}

impl ProperIndicator {
    pub fn new(a: SetSpec, d: Option<SetSpec>) -> Result<Self, GeometryError> {
        let a_box = a.bounding_box().ok_or(GeometryError::NotCompact)?;
        let dist_a_to_dc = match &d {
            None => f64::INFINITY,
            Some(d) => {
                if matches!(d, SetSpec::Union(_)) {
                    return Err(GeometryError::Unsupported("indicator domain D"));
                }
                if a.dim() != d.dim() {
                    return Err(GeometryError::Dimension {
                        expected: a.dim().unwrap_or(0),
                        got: d.dim().unwrap_or(0),
                    });
                }
                let dist = set_to_complement_distance(&a, &a_box, d);
                if !(dist > 0.0) {
                    return Err(GeometryError::NotInside(dist));
                }
                dist
            }
        };
        Ok(Self { a, d, dist_a_to_dc })
    }

    pub fn a(&self) -> &SetSpec {
        &self.a
    }

    pub fn d(&self) -> Option<&SetSpec> {
        self.d.as_ref()
    }

    /// `dist(A, R^n \ D)`; infinite when `D` is the whole space.
    pub fn dist_a_to_dc(&self) -> f64 {
        self.dist_a_to_dc
    }

    /// True if `x` is in the open set `D`.
    pub fn in_domain(&self, x: &[f64]) -> bool {
        match &self.d {
            None => true,
            Some(d) => d.depth_raw(x) > 0.0,
        }
    }

    /// Indicator value; `+inf` outside the open domain.
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let to_a = self.a.dist_raw(x);
        match &self.d {
            None => to_a,
            Some(d) => {
                let depth = d.depth_raw(x);
                if depth <= 0.0 {
                    f64::INFINITY
                } else {
                    to_a.max(1.0 / depth - 2.0 / self.dist_a_to_dc)
                }
            }
        }
    }
}

/// `inf_{x in A} dist(x, R^n \ D)`: exact for box pairs, otherwise by grid
/// sampling of `A` with local refinement down to a spacing of `1e-6`.
fn set_to_complement_distance(a: &SetSpec, a_box: &BoxSet, d: &SetSpec) -> f64 {
    if let (SetSpec::Box(ab), SetSpec::Box(db)) = (a, d) {
        if !db.contains(&ab.lo) || !db.contains(&ab.hi) {
            return 0.0;
        }
        let mut m = f64::INFINITY;
        for i in 0..ab.dim() {
            m = m.min(ab.lo[i] - db.lo[i]).min(db.hi[i] - ab.hi[i]);
        }
        return m;
    }
    let n = a_box.dim();
    let per_axis: usize = match n {
        1 => 2001,
        2 => 201,
        3 => 41,
        _ => 11,
    };
    let mut lo = a_box.lo.clone();
    let mut hi = a_box.hi.clone();
    let mut best = f64::INFINITY;
    let mut best_pt: Option<Vec<f64>> = None;
    loop {
        let steps: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l) / (per_axis - 1) as f64)
            .collect();
        let total = per_axis.pow(n as u32);
        let mut p = vec![0.0; n];
        for flat in 0..total {
            let mut rem = flat;
            for i in 0..n {
                p[i] = lo[i] + (rem % per_axis) as f64 * steps[i];
                rem /= per_axis;
            }
            if a.contains_raw(&p) {
                let v = d.depth_raw(&p);
                if v < best {
                    best = v;
                    best_pt = Some(p.clone());
                }
            }
        }
        let max_step = steps.iter().fold(0.0f64, |m, s| m.max(*s));
        match &best_pt {
            Some(bp) if max_step > 1e-6 => {
                for i in 0..n {
                    lo[i] = (bp[i] - 2.0 * steps[i]).max(a_box.lo[i]);
                    hi[i] = (bp[i] + 2.0 * steps[i]).min(a_box.hi[i]);
                }
            }
            _ => break,
        }
    }
    for c in a.box_corners() {
        best = best.min(d.depth_raw(&c));
    }
    best
}

/// Uniform cell-centered grid over a bounded box.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    domain: BoxSet,
    counts: Vec<usize>,
    widths: Vec<f64>,
    len: usize,
}

impl Grid {
    /// Grid with cells no wider than `resolution` on each axis.
    pub fn new(domain: BoxSet, resolution: f64) -> Result<Self, GeometryError> {
        Self::with_cap(domain, resolution, DEFAULT_GRID_CAP)
    }

    pub fn with_cap(domain: BoxSet, resolution: f64, cap: usize) -> Result<Self, GeometryError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(GeometryError::BadResolution(resolution));
        }
        if !domain.is_bounded() || domain.lo.iter().zip(&domain.hi).any(|(l, h)| h <= l) {
            return Err(GeometryError::UnboundedDomain);
        }
        let raw: Vec<f64> = domain
            .lo
            .iter()
            .zip(&domain.hi)
            .map(|(l, h)| ((h - l) / resolution - 1e-9).ceil().max(1.0))
            .collect();
        let points: f64 = raw.iter().product();
        if points > cap as f64 {
            let volume: f64 = domain.lo.iter().zip(&domain.hi).map(|(l, h)| h - l).product();
            let min_resolution = (volume / cap as f64).powf(1.0 / domain.dim() as f64);
            return Err(GeometryError::GridTooLarge {
                points,
                cap,
                min_resolution,
            });
        }
        let counts: Vec<usize> = raw.iter().map(|c| *c as usize).collect();
        let widths = domain
            .lo
            .iter()
            .zip(&domain.hi)
            .zip(&counts)
            .map(|((l, h), c)| (h - l) / *c as f64)
            .collect();
        Ok(Self {
            domain,
            len: counts.iter().product(),
            counts,
            widths,
        })
    }

    pub fn domain(&self) -> &BoxSet {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    /// Half the cell diagonal.
    pub fn cell_radius(&self) -> f64 {
        0.5 * self.widths.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Largest cell width.
    pub fn max_width(&self) -> f64 {
        self.widths.iter().fold(0.0, |m, w| m.max(*w))
    }

    pub fn point_into(&self, index: usize, out: &mut [f64]) {
        let mut rem = index;
        for i in 0..self.dim() {
            let k = rem % self.counts[i];
            rem /= self.counts[i];
            out[i] = self.domain.lo[i] + (k as f64 + 0.5) * self.widths[i];
        }
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(index, &mut p);
        p
    }

    pub fn multi_index(&self, index: usize) -> Vec<usize> {
        let mut rem = index;
        self.counts
            .iter()
            .map(|c| {
                let k = rem % c;
                rem /= c;
                k
            })
            .collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (k, c) in multi.iter().zip(&self.counts) {
            idx += k * stride;
            stride *= c;
        }
        idx
    }

    /// Cell containing `x`, or `None` outside the domain. Points on the
    /// upper domain face belong to the last cell.
    #[inline]
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        let mut stride = 1;
        for i in 0..self.dim() {
            let v = x[i];
            if !(v >= self.domain.lo[i] && v <= self.domain.hi[i]) {
                return None;
            }
            let k = (((v - self.domain.lo[i]) / self.widths[i]) as usize).min(self.counts[i] - 1);
            idx += k * stride;
            stride *= self.counts[i];
        }
        Some(idx)
    }

    /// Continuous cell coordinates (cell units from the lower face).
    pub fn cell_coords(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.dim() {
            out[i] = (x[i] - self.domain.lo[i]) / self.widths[i];
        }
    }

    /// Indices of grid points lying in `set`.
    pub fn points_in(&self, set: &SetSpec) -> Vec<usize> {
        let mut p = vec![0.0; self.dim()];
        (0..self.len)
            .filter(|&i| {
                self.point_into(i, &mut p);
                set.contains_raw(&p)
            })
            .collect()
    }

    /// Boolean mask of grid points lying in `set`.
    pub fn mask_of(&self, set: &SetSpec) -> Vec<bool> {
        let mut p = vec![0.0; self.dim()];
        (0..self.len)
            .map(|i| {
                self.point_into(i, &mut p);
                set.contains_raw(&p)
            })
            .collect()
    }

    /// Face neighbours of a cell.
    pub fn neighbors(&self, index: usize) -> Vec<usize> {
        let multi = self.multi_index(index);
        let mut out = Vec::with_capacity(2 * self.dim());
        for i in 0..self.dim() {
            let mut m = multi.clone();
            if multi[i] > 0 {
                m[i] = multi[i] - 1;
                out.push(self.flat_index(&m));
            }
            if multi[i] + 1 < self.counts[i] {
                m[i] = multi[i] + 1;
                out.push(self.flat_index(&m));
            }
        }
        out
    }

    /// Writes `x1..xn,value` rows for every cell.
    pub fn write_mask_csv<W: Write>(
        &self,
        mut w: W,
        vars: &[String],
        mask: &[bool],
    ) -> io::Result<()> {
        writeln!(w, "{},value", vars.join(","))?;
        let mut p = vec![0.0; self.dim()];
        for (i, m) in mask.iter().enumerate() {
            self.point_into(i, &mut p);
            let coords: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", coords.join(","), u8::from(*m))?;
        }
        Ok(())
    }
}

/// Extent of the marked cells along each axis as `(lo, hi)` cell-center
/// coordinates, or `None` when nothing is marked.
pub fn mask_extent(grid: &Grid, mask: &[bool]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = grid.dim();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut p = vec![0.0; n];
    let mut any = false;
    for (i, m) in mask.iter().enumerate() {
        if *m {
            any = true;
            grid.point_into(i, &mut p);
            for k in 0..n {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    any.then_some((lo, hi))
}
