//! Counting flow lines with cascades between generators.
//!
//! A pair `(x, y)` is counted either forward (shooting out of `x` under the
//! objective and `h`) or backward (shooting out of `y` under their negatives),
//! whichever gives the smaller shooting parameter space. Zero-dimensional
//! parameter spaces are finite sets of shots; one-dimensional ones are
//! scanned with a side function that changes sign where the endpoint path
//! crosses the stable manifold of the target.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::auxiliary::{offset_along, AuxiliaryMorse, HCriticalPoint, ManifoldView, MorseFunction};
use super::survey::CriticalManifold;
use super::MorseBottError;
use crate::flow::{refine_unchecked, shoot_unstable, Controller, FlowStatus, KERNEL_TOL, REFINE_MAX_ITER, REFINE_TOL};
use crate::objective::{metric_dot, spectrum, Objective, ObjectiveError};

/// `sign * f` for an objective `f`; used to count cascades backward.
pub struct Signed<'a, O: Objective + ?Sized> {
    pub inner: &'a O,
    pub sign: f64,
}

impl<O: Objective + ?Sized> Objective for Signed<'_, O> {
    type Point = O::Point;

    fn name(&self) -> String {
        if self.sign < 0.0 {
            format!("-{}", self.inner.name())
        } else {
            self.inner.name()
        }
    }
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }
    fn manifold_dim(&self) -> usize {
        self.inner.manifold_dim()
    }
    fn metric(&self) -> DVector<f64> {
        self.inner.metric()
    }
    fn value(&self, p: &O::Point) -> Result<f64, ObjectiveError> {
        Ok(self.sign * self.inner.value(p)?)
    }
    fn gradient(&self, p: &O::Point) -> Result<DVector<f64>, ObjectiveError> {
        Ok(self.inner.gradient(p)? * self.sign)
    }
    fn tangent_basis(&self, p: &O::Point) -> DMatrix<f64> {
        self.inner.tangent_basis(p)
    }
    fn hessian(&self, p: &O::Point) -> Result<DMatrix<f64>, ObjectiveError> {
        Ok(self.inner.hessian(p)? * self.sign)
    }
    fn retract(&self, p: &O::Point, v: &DVector<f64>) -> O::Point {
        self.inner.retract(p, v)
    }
    fn log_difference(&self, p: &O::Point, q: &O::Point) -> DVector<f64> {
        self.inner.log_difference(p, q)
    }
    fn distance(&self, p: &O::Point, q: &O::Point) -> f64 {
        self.inner.distance(p, q)
    }
    fn random_point(&self, rng: &mut dyn RngCore) -> O::Point {
        self.inner.random_point(rng)
    }
    fn base_point(&self) -> O::Point {
        self.inner.base_point()
    }
    fn fingerprint(&self, p: &O::Point) -> Result<Vec<f64>, ObjectiveError> {
        self.inner.fingerprint(p)
    }
    fn observables(&self, p: &O::Point) -> DVector<f64> {
        self.inner.observables(p)
    }
    fn observable_jacobian(&self, p: &O::Point) -> DMatrix<f64> {
        self.inner.observable_jacobian(p)
    }
    fn orbit_dimension(&self, p: &O::Point) -> usize {
        self.inner.orbit_dimension(p)
    }
    fn stabilizer_dimension(&self, p: &O::Point) -> usize {
        self.inner.stabilizer_dimension(p)
    }
    fn step_jump(&self, p: &O::Point, q: &O::Point) -> f64 {
        self.inner.step_jump(p, q)
    }
    fn constraint_error(&self, p: &O::Point) -> f64 {
        self.inner.constraint_error(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeParams {
    /// Offset from the source along the shooting direction.
    pub epsilon: f64,
    /// Endpoint distance below which a line is certified.
    pub delta_match: f64,
    /// Bisection stops once the bracket is this narrow.
    pub param_tol: f64,
    /// Initial samples per one-dimensional parameter family.
    pub grid: usize,
    /// Side function is defined only when the path comes this close.
    pub capture_radius: f64,
    pub h_flow_steps: usize,
    pub controller: Controller,
}

impl Default for CascadeParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            delta_match: 1e-4,
            param_tol: 1e-6,
            grid: 48,
            capture_radius: 0.3,
            h_flow_steps: 4000,
            controller: Controller::default(),
        }
    }
}

/// An isolated flow line with cascades, located in shooting coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifiedLine {
    /// `[branch, t]`: branch selects a sign or a curve, `t` the position on it.
    pub parameter: Vec<f64>,
    pub cascades: usize,
    pub endpoint_distance: f64,
    /// Width of the parameter bracket that isolates the line.
    pub bracket: f64,
    pub backward: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeCount {
    pub from: usize,
    pub to: usize,
    pub parity: u8,
    pub method: String,
    pub lines: Vec<CertifiedLine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PlanKind {
    /// Two shots along the single h-unstable direction.
    HShots,
    /// Two shots along the single normal unstable direction.
    NormalShots,
    /// Circle of directions in a two-dimensional h-unstable space.
    HCircle,
    /// Circle of directions in a two-dimensional normal unstable space.
    NormalCircle,
    /// The h-unstable curve through the source, times both normal directions.
    CurveLines,
}

/// Shooting data for one ordered pair of generators in one time direction.
pub struct Plan<'c, P> {
    pub kind: PlanKind,
    pub sign: f64,
    pub source: &'c HCriticalPoint<P>,
    pub target: &'c HCriticalPoint<P>,
    pub source_manifold: &'c CriticalManifold<P>,
    pub target_manifold: &'c CriticalManifold<P>,
    pub source_h: &'c MorseFunction,
    pub target_h: &'c MorseFunction,
    /// The target has exactly one unstable h-direction and no unstable
    /// normal directions, so a side function exists.
    pub target_sided: bool,
    curve: Option<Curve<P>>,
    stable: Option<StableCurve<P>>,
}

struct Curve<P> {
    points: Vec<P>,
    arclength: Vec<f64>,
    normals: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Probe {
    /// Closest approach of the final h-path to the target.
    pub approach: f64,
    /// Signed offset along the target's unstable h-direction at closest approach.
    pub side: Option<f64>,
}

impl Probe {
    const MISS: Probe = Probe { approach: f64::INFINITY, side: None };
}

pub struct CascadeContext<'a, O: Objective + ?Sized> {
    pub obj: &'a O,
    /// All surveyed components, including those excluded from the complex.
    pub manifolds: &'a [CriticalManifold<O::Point>],
    pub morse: &'a [AuxiliaryMorse<O::Point>],
    pub params: CascadeParams,
}

/// Subdivision rounds of the parameter scan.
const REFINE_ROUNDS: usize = 24;

/// One-dimensional stable h-set of a target as a fine polyline through it,
/// with unit normals inside the target manifold oriented continuously.
struct StableCurve<P> {
    points: Vec<P>,
    normals: Vec<DVector<f64>>,
}

/// Displacement cap when tracing a stable curve; keeps chord errors far
/// below the match tolerance.
const STABLE_STEP: f64 = 0.01;

fn fingerprints_match(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-4)
}

fn ind_h_signed<P>(p: &HCriticalPoint<P>, dim: usize, sign: f64) -> usize {
    if sign > 0.0 {
        p.ind_h
    } else {
        dim - p.ind_h
    }
}

fn h_stable_signed<P>(p: &HCriticalPoint<P>, sign: f64) -> DMatrix<f64> {
    let d = p.h_directions.ncols();
    if sign > 0.0 {
        p.h_directions.columns(p.ind_h, d - p.ind_h).into_owned()
    } else {
        p.h_unstable()
    }
}

fn h_unstable_signed<P>(p: &HCriticalPoint<P>, sign: f64) -> DMatrix<f64> {
    if sign > 0.0 {
        p.h_unstable()
    } else {
        let d = p.h_directions.ncols();
        p.h_directions.columns(p.ind_h, d - p.ind_h).into_owned()
    }
}

impl<'a, O: Objective + ?Sized> CascadeContext<'a, O> {
    fn manifold(&self, id: usize) -> &'a CriticalManifold<O::Point> {
        self.manifolds.iter().find(|m| m.id == id).expect("generator refers to a surveyed manifold")
    }

    fn h_of(&self, id: usize) -> &'a MorseFunction {
        &self.morse.iter().find(|m| m.manifold == id).expect("manifold has an auxiliary function").function
    }

    fn normal_dim(&self, m: &CriticalManifold<O::Point>) -> usize {
        self.obj.manifold_dim() - m.kernel_dim
    }

    fn ind_ym_signed(&self, m: &CriticalManifold<O::Point>, sign: f64) -> usize {
        if sign > 0.0 {
            m.index
        } else {
            self.normal_dim(m) - m.index
        }
    }

    fn signed(&self, sign: f64) -> Signed<'a, O> {
        Signed { inner: self.obj, sign }
    }

    /// Normal unstable directions of `sign * f` at `p`.
    fn normal_unstable(&self, p: &O::Point, sign: f64) -> DMatrix<f64> {
        match spectrum(&self.signed(sign), p) {
            Ok(s) => s.columns(&s.negative_indices(KERNEL_TOL)),
            Err(_) => DMatrix::zeros(self.obj.ambient_dim(), 0),
        }
    }

    /// Whether some surveyed level lies strictly between the two energies.
    fn intermediate_level(&self, lo: f64, hi: f64) -> bool {
        self.manifolds.iter().any(|m| m.energy > lo + 1e-8 && m.energy < hi - 1e-8)
    }

    /// Builds the shooting plan from `s` to `t` under `sign`. Returns the
    /// parameter dimension and the plan, or `None` when no shooting form
    /// of dimension at most one applies.
    pub fn plan<'c>(&'c self, s: &'c HCriticalPoint<O::Point>, t: &'c HCriticalPoint<O::Point>, sign: f64) -> Option<(usize, Plan<'c, O::Point>)> {
        let ms = self.manifold(s.manifold);
        let mt = self.manifold(t.manifold);
        let a = ind_h_signed(s, ms.kernel_dim, sign);
        let target_sided = ind_h_signed(t, mt.kernel_dim, sign) == 1 && (ms.id == mt.id || self.ind_ym_signed(mt, sign) == 0);
        let mut plan = Plan {
            kind: PlanKind::HShots,
            sign,
            source: s,
            target: t,
            source_manifold: ms,
            target_manifold: mt,
            source_h: self.h_of(ms.id),
            target_h: self.h_of(mt.id),
            target_sided,
            curve: None,
            stable: None,
        };
        if ms.id == mt.id {
            let kind = match a {
                1 => PlanKind::HShots,
                2 => PlanKind::HCircle,
                _ => return None,
            };
            plan.kind = kind;
            return Some((a - 1, plan));
        }
        let b = self.ind_ym_signed(ms, sign);
        let kind = match (a, b) {
            (0, 1) => PlanKind::NormalShots,
            (0, 2) => PlanKind::NormalCircle,
            (1, 1) => PlanKind::CurveLines,
            _ => return None,
        };
        plan.kind = kind;
        Some((a + b - 1, plan))
    }

    /// Counts flow lines with cascades from `x` to `y` modulo 2.
    pub fn enumerate_cascades(&self, x: &HCriticalPoint<O::Point>, y: &HCriticalPoint<O::Point>, ids: (usize, usize)) -> Result<CascadeCount, MorseBottError> {
        let unresolved = |reason: String| MorseBottError::Unresolved { from: ids.0, to: ids.1, reason };
        let zero = |method: &str| CascadeCount { from: ids.0, to: ids.1, parity: 0, method: method.into(), lines: vec![] };
        if x.Ind() != y.Ind() + 1 {
            return Err(unresolved(format!("index difference {} is not 1", x.Ind() as i64 - y.Ind() as i64)));
        }
        let mx = self.manifold(x.manifold);
        let my = self.manifold(y.manifold);
        if mx.id != my.id {
            if mx.energy <= my.energy + 1e-12 {
                return Ok(zero("energy"));
            }
            if self.ind_ym_signed(mx, 1.0) == 0 || self.ind_ym_signed(my, -1.0) == 0 {
                return Ok(zero("no unstable normal directions"));
            }
            if self.intermediate_level(my.energy, mx.energy) {
                return Err(unresolved("intermediate critical level requires two or more cascades".into()));
            }
        }
        let best = [self.plan(x, y, 1.0), self.plan(y, x, -1.0)]
            .into_iter()
            .flatten()
            .filter(|(d, p)| *d == 0 || (*d == 1 && p.target_sided))
            .min_by_key(|(d, _)| *d);
        let Some((pdim, mut plan)) = best else {
            return Err(unresolved("no supported shooting plan".into()));
        };
        let method = format!("{:?}{}", plan.kind, if plan.sign < 0.0 { " backward" } else { "" });
        if plan.kind == PlanKind::CurveLines {
            self.build_curve(&mut plan).map_err(&unresolved)?;
        }
        self.build_stable(&mut plan);
        let lines = match pdim {
            0 => self.count_shots(&plan),
            1 => self.count_family(&plan).map_err(&unresolved)?,
            _ => return Err(unresolved(format!("shooting parameter space of dimension {pdim}"))),
        };
        let mut lines = lines;
        let cascades = usize::from(mx.id != my.id);
        for l in &mut lines {
            l.cascades = cascades;
        }
        Ok(CascadeCount { from: ids.0, to: ids.1, parity: (lines.len() % 2) as u8, method, lines })
    }

    fn count_shots(&self, plan: &Plan<'_, O::Point>) -> Vec<CertifiedLine> {
        [0usize, 1]
            .into_par_iter()
            .filter_map(|branch| {
                let pr = self.probe(plan, branch, 0.0);
                (pr.approach < self.params.delta_match).then(|| CertifiedLine {
                    parameter: vec![branch as f64, 0.0],
                    cascades: 0,
                    endpoint_distance: pr.approach,
                    bracket: 0.0,
                    backward: plan.sign < 0.0,
                })
            })
            .collect()
    }

    /// Parameter families of a one-dimensional plan: `(branch, lo, hi, periodic)`.
    fn families(&self, plan: &Plan<'_, O::Point>) -> Vec<(usize, f64, f64, bool)> {
        use std::f64::consts::TAU;
        match plan.kind {
            PlanKind::HCircle | PlanKind::NormalCircle => vec![(0, 0.0, TAU, true)],
            PlanKind::CurveLines => {
                let len = *plan.curve.as_ref().expect("curve built").arclength.last().expect("curve non-empty");
                vec![(0, 0.0, len, false), (1, 0.0, len, false)]
            }
            PlanKind::HShots | PlanKind::NormalShots => vec![],
        }
    }

    fn count_family(&self, plan: &Plan<'_, O::Point>) -> Result<Vec<CertifiedLine>, String> {
        let mut lines = Vec::new();
        for (branch, lo, hi, periodic) in self.families(plan) {
            lines.extend(self.scan_family(plan, branch, lo, hi, periodic)?);
        }
        Ok(lines)
    }

    fn scan_family(&self, plan: &Plan<'_, O::Point>, branch: usize, lo: f64, hi: f64, periodic: bool) -> Result<Vec<CertifiedLine>, String> {
        let n = self.params.grid.max(4);
        let count = if periodic { n } else { n + 1 };
        let ts: Vec<f64> = (0..count).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
        let mut samples: Vec<(f64, Probe)> = ts.par_iter().map(|&t| (t, self.probe(plan, branch, t))).collect();
        // refine between defined and undefined neighbours, and around dips
        // of the approach where a crossing could hide between samples
        for _ in 0..REFINE_ROUNDS {
            let mut inserted = Vec::new();
            let len = samples.len();
            let pairs = if periodic { len } else { len - 1 };
            let gap = |i: usize| {
                let (ta, _) = samples[i % len];
                let (mut tb, _) = samples[(i + 1) % len];
                if tb <= ta {
                    tb += hi - lo;
                }
                (ta, tb)
            };
            for i in 0..pairs {
                let (ta, tb) = gap(i);
                let (pa, pb) = (samples[i].1, samples[(i + 1) % len].1);
                if pa.side.is_some() != pb.side.is_some() && tb - ta > 1e-4 * (hi - lo) {
                    inserted.push(0.5 * (ta + tb));
                }
            }
            for i in 0..len {
                if !periodic && (i == 0 || i + 1 == len) {
                    continue;
                }
                let prev = (i + len - 1) % len;
                let (p, pl, pr) = (samples[i].1, samples[prev].1, samples[(i + 1) % len].1);
                if p.approach >= pl.approach || p.approach >= pr.approach || !p.approach.is_finite() {
                    continue;
                }
                for j in [prev, i] {
                    let (ta, tb) = gap(j);
                    if tb - ta > 1e-7 * (hi - lo) {
                        inserted.push(0.5 * (ta + tb));
                    }
                }
            }
            inserted.sort_by(f64::total_cmp);
            inserted.dedup();
            if inserted.is_empty() {
                break;
            }
            let fresh: Vec<(f64, Probe)> = inserted
                .par_iter()
                .map(|&t| {
                    let t = if t >= hi && periodic { t - (hi - lo) } else { t };
                    (t, self.probe(plan, branch, t))
                })
                .collect();
            samples.extend(fresh);
            samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let len = samples.len();
        let pairs = if periodic { len } else { len - 1 };
        let mut lines = Vec::new();
        for i in 0..pairs {
            let (ta, pa) = samples[i];
            let (mut tb, pb) = samples[(i + 1) % len];
            if tb <= ta {
                tb += hi - lo;
            }
            let (Some(sa), Some(sb)) = (pa.side, pb.side) else { continue };
            if sa.signum() == sb.signum() {
                continue;
            }
            lines.push(self.bisect(plan, branch, (ta, sa), (tb, sb), (lo, hi, periodic))?);
        }
        Ok(lines)
    }

    fn bisect(&self, plan: &Plan<'_, O::Point>, branch: usize, a: (f64, f64), b: (f64, f64), range: (f64, f64, bool)) -> Result<CertifiedLine, String> {
        let (lo, hi, periodic) = range;
        let wrap = |t: f64| if periodic && t >= hi { t - (hi - lo) } else { t };
        let (mut ta, sa) = a;
        let mut tb = b.0;
        let (_, mut la) = self.probe_at(plan, branch, wrap(ta));
        let (_, mut lb) = self.probe_at(plan, branch, wrap(tb));
        let mut best = (f64::INFINITY, ta);
        // W^s_h(y) separates the endpoints at the bracket ends, so their
        // distance bounds the distance from either endpoint to it. The closest
        // approach to y itself shrinks far more slowly near a saddle.
        // A traced stable curve already measures that distance directly.
        let endpoint_distance = |best: f64, la: &Option<O::Point>, lb: &Option<O::Point>| match (la, lb) {
            (Some(p), Some(q)) if plan.stable.is_none() => best.min(self.obj.distance(p, q)),
            _ => best,
        };
        let floor = 1e-13 * hi.abs().max(1.0);
        while (tb - ta > self.params.param_tol || endpoint_distance(best.0, &la, &lb) >= self.params.delta_match) && tb - ta > floor {
            let tm = 0.5 * (ta + tb);
            let (pr, lm) = self.probe_at(plan, branch, wrap(tm));
            if pr.approach < best.0 {
                best = (pr.approach, tm);
            }
            match pr.side {
                None => return Err(format!("side function undefined inside bracket at {tm:.6}")),
                Some(0.0) => {
                    (ta, tb, la, lb) = (tm, tm, lm.clone(), lm);
                    best.1 = tm;
                }
                Some(s) if s.signum() == sa.signum() => (ta, la) = (tm, lm),
                Some(_) => (tb, lb) = (tm, lm),
            }
        }
        let distance = endpoint_distance(best.0, &la, &lb);
        if distance >= self.params.delta_match {
            return Err(format!("sign change at {:.6} not certified: endpoint distance {distance:.3e}", wrap(best.1)));
        }
        Ok(CertifiedLine {
            parameter: vec![branch as f64, wrap(0.5 * (ta + tb))],
            cascades: 0,
            endpoint_distance: distance,
            bracket: tb - ta,
            backward: plan.sign < 0.0,
        })
    }

    /// Follows the shooting parameter `(branch, t)` to its final h-path and
    /// measures it against the target.
    pub fn probe(&self, plan: &Plan<'_, O::Point>, branch: usize, t: f64) -> Probe {
        self.probe_at(plan, branch, t).0
    }

    /// Like [`probe`](Self::probe), also returning where the final h-path starts.
    fn probe_at(&self, plan: &Plan<'_, O::Point>, branch: usize, t: f64) -> (Probe, Option<O::Point>) {
        let pm = if branch == 0 { 1.0 } else { -1.0 };
        let s = &plan.source.point;
        match plan.kind {
            PlanKind::HShots => self.h_shot(plan, &(plan_h_dir(plan, 0) * pm)),
            PlanKind::HCircle => {
                let w = h_unstable_signed(plan.source, plan.sign);
                self.h_shot(plan, &(w.column(0) * t.cos() + w.column(1) * t.sin()))
            }
            PlanKind::NormalShots | PlanKind::NormalCircle => {
                let u = self.normal_unstable(s, plan.sign);
                let dir = if plan.kind == PlanKind::NormalShots {
                    u.column(0) * pm
                } else {
                    u.column(0) * t.cos() + u.column(1) * t.sin()
                };
                self.normal_shot(plan, s, &dir)
            }
            PlanKind::CurveLines => {
                let curve = plan.curve.as_ref().expect("curve built");
                let Some((a, reference)) = self.curve_point(curve, t) else { return (Probe::MISS, None) };
                let u = self.normal_unstable(&a, plan.sign);
                if u.ncols() != 1 {
                    return (Probe::MISS, None);
                }
                let mut dir = u.column(0).into_owned();
                if metric_dot(&self.obj.metric(), &dir, &reference) < 0.0 {
                    dir = -dir;
                }
                self.normal_shot(plan, &a, &(dir * pm))
            }
        }
    }

    fn h_shot(&self, plan: &Plan<'_, O::Point>, dir: &DVector<f64>) -> (Probe, Option<O::Point>) {
        let view = ManifoldView::new(self.obj, plan.source_manifold.kernel_dim);
        let Some(start) = view.project(&self.obj.retract(&plan.source.point, &(dir * self.params.epsilon))) else { return (Probe::MISS, None) };
        let flow = view.h_flow(plan.source_h, plan.sign, &start, self.params.h_flow_steps);
        (self.judge(plan, &flow.path), Some(start))
    }

    fn normal_shot(&self, plan: &Plan<'_, O::Point>, a: &O::Point, dir: &DVector<f64>) -> (Probe, Option<O::Point>) {
        let signed = self.signed(plan.sign);
        let Ok(traj) = shoot_unstable(&signed, a, dir, self.params.epsilon, &self.params.controller) else { return (Probe::MISS, None) };
        if traj.status != FlowStatus::Converged {
            return (Probe::MISS, None);
        }
        let Ok(landing) = refine_unchecked(self.obj, traj.last(), REFINE_TOL, REFINE_MAX_ITER) else { return (Probe::MISS, None) };
        match self.obj.fingerprint(&landing) {
            Ok(fp) if fingerprints_match(&fp, &plan.target_manifold.fingerprint) => {}
            _ => return (Probe::MISS, None),
        }
        if let Some(stable) = &plan.stable {
            return (self.judge_stable(stable, &landing), Some(landing));
        }
        let view = ManifoldView::new(self.obj, plan.target_manifold.kernel_dim);
        let flow = view.h_flow(plan.target_h, plan.sign, &landing, self.params.h_flow_steps);
        (self.judge(plan, &flow.path), Some(landing))
    }

    /// Distance from `q` to the stable curve and its signed offset.
    fn judge_stable(&self, stable: &StableCurve<O::Point>, q: &O::Point) -> Probe {
        let metric = self.obj.metric();
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in stable.points.windows(2).enumerate() {
            let a = self.obj.log_difference(&w[0], q);
            let v = self.obj.log_difference(&w[0], &w[1]);
            let vv = metric_dot(&metric, &v, &v);
            let s = if vv > 0.0 { (metric_dot(&metric, &a, &v) / vv).clamp(0.0, 1.0) } else { 0.0 };
            let r = a - v * s;
            let dist = metric_dot(&metric, &r, &r).sqrt();
            if dist < best.0 {
                best = (dist, metric_dot(&metric, &r, &stable.normals[i]));
            }
        }
        Probe { approach: best.0, side: (best.0 < self.params.capture_radius).then_some(best.1) }
    }

    /// Traces the stable curve of a target whose stable h-set is
    /// one-dimensional, for plans whose final h-path starts after a normal shot.
    fn build_stable(&self, plan: &mut Plan<'_, O::Point>) {
        let mt = plan.target_manifold;
        let cross = matches!(plan.kind, PlanKind::NormalShots | PlanKind::NormalCircle | PlanKind::CurveLines);
        if !cross || mt.kernel_dim != 2 || ind_h_signed(plan.target, 2, plan.sign) != 1 {
            return;
        }
        let view = ManifoldView::new(self.obj, 2);
        let y = &plan.target.point;
        let u = h_stable_signed(plan.target, plan.sign).column(0).into_owned();
        let mut branches = Vec::new();
        for pm in [-1.0, 1.0] {
            let Some(start) = view.project(&self.obj.retract(y, &(&u * (pm * 1e-4)))) else { return };
            let flow = view.h_flow_capped(plan.target_h, -plan.sign, &start, 50 * self.params.h_flow_steps, STABLE_STEP, Some(y));
            branches.push(flow.path);
        }
        let mut points: Vec<O::Point> = branches[0].iter().rev().cloned().collect();
        let centre = points.len();
        points.push(y.clone());
        points.extend(branches[1].iter().cloned());
        let metric = self.obj.metric();
        let normal_at = |i: usize| -> DVector<f64> {
            let (a, b) = if i + 1 < points.len() { (i, i + 1) } else { (i - 1, i) };
            let v = self.obj.log_difference(&points[a], &points[b]);
            let v = &v / metric_dot(&metric, &v, &v).sqrt().max(f64::MIN_POSITIVE);
            view.frame(&points[i])
                .column_iter()
                .map(|c| c - &v * metric_dot(&metric, &c.into_owned(), &v))
                .max_by(|a, b| metric_dot(&metric, a, a).total_cmp(&metric_dot(&metric, b, b)))
                .map(|r| &r / metric_dot(&metric, &r, &r).sqrt())
                .unwrap_or_else(|| DVector::zeros(v.len()))
        };
        let mut normals = vec![DVector::zeros(0); points.len()];
        let w = h_unstable_signed(plan.target, plan.sign).column(0).into_owned();
        let mut n = normal_at(centre);
        if metric_dot(&metric, &n, &w) < 0.0 {
            n = -n;
        }
        normals[centre] = n;
        let order: Vec<usize> = ((centre + 1)..points.len()).chain((0..centre).rev()).collect();
        for i in order {
            let prev = if i > centre { i - 1 } else { i + 1 };
            let mut n = normal_at(i);
            if metric_dot(&metric, &n, &normals[prev]) < 0.0 {
                n = -n;
            }
            normals[i] = n;
        }
        plan.stable = Some(StableCurve { points, normals });
    }

    fn judge(&self, plan: &Plan<'_, O::Point>, path: &[O::Point]) -> Probe {
        let t = &plan.target.point;
        let Some((approach, closest)) = path.iter().map(|p| (self.obj.distance(t, p), p)).min_by(|a, b| a.0.total_cmp(&b.0)) else {
            return Probe::MISS;
        };
        let w = h_unstable_signed(plan.target, plan.sign);
        let side = (w.ncols() == 1 && approach < self.params.capture_radius)
            .then(|| offset_along(self.obj, t, closest, &w.column(0).into_owned()));
        Probe { approach, side }
    }

    /// Unstable h-curve through the source as a polyline, with normal
    /// unstable directions aligned continuously along it.
    fn build_curve(&self, plan: &mut Plan<'_, O::Point>) -> Result<(), String> {
        let view = ManifoldView::new(self.obj, plan.source_manifold.kernel_dim);
        let s = &plan.source.point;
        let v = plan_h_dir(plan, 0);
        let mut branches = Vec::new();
        for pm in [-1.0, 1.0] {
            let start = view.project(&self.obj.retract(s, &(&v * (pm * self.params.epsilon)))).ok_or("projection failed on unstable curve")?;
            let flow = view.h_flow(plan.source_h, plan.sign, &start, self.params.h_flow_steps);
            branches.push(flow.path);
        }
        let mut points: Vec<O::Point> = branches[0].iter().rev().cloned().collect();
        points.push(s.clone());
        points.extend(branches[1].iter().cloned());
        let mut arclength = vec![0.0];
        for w in points.windows(2) {
            let last = *arclength.last().expect("non-empty");
            arclength.push(last + self.obj.distance(&w[0], &w[1]));
        }
        let centre = branches[0].len();
        let mut normals = vec![DVector::zeros(0); points.len()];
        let u0 = self.normal_unstable(s, plan.sign);
        if u0.ncols() != 1 {
            return Err("source does not have exactly one normal unstable direction".into());
        }
        normals[centre] = u0.column(0).into_owned();
        let metric = self.obj.metric();
        let order: Vec<usize> = ((centre + 1)..points.len()).chain((0..centre).rev()).collect();
        for i in order {
            let prev = if i > centre { i - 1 } else { i + 1 };
            let u = self.normal_unstable(&points[i], plan.sign);
            if u.ncols() != 1 {
                return Err("normal unstable space changes dimension along the curve".into());
            }
            let mut u = u.column(0).into_owned();
            if metric_dot(&metric, &u, &normals[prev]) < 0.0 {
                u = -u;
            }
            normals[i] = u;
        }
        plan.curve = Some(Curve { points, arclength, normals });
        Ok(())
    }

    fn curve_point(&self, curve: &Curve<O::Point>, t: f64) -> Option<(O::Point, DVector<f64>)> {
        let i = curve.arclength.partition_point(|&l| l <= t).saturating_sub(1).min(curve.points.len() - 1);
        if i + 1 >= curve.points.len() {
            return Some((curve.points[i].clone(), curve.normals[i].clone()));
        }
        let seg = curve.arclength[i + 1] - curve.arclength[i];
        let frac = if seg > 0.0 { (t - curve.arclength[i]) / seg } else { 0.0 };
        let p = &curve.points[i];
        let step = self.obj.log_difference(p, &curve.points[i + 1]) * frac;
        let q = refine_unchecked(self.obj, &self.obj.retract(p, &step), REFINE_TOL, REFINE_MAX_ITER).ok()?;
        let reference = if frac < 0.5 { &curve.normals[i] } else { &curve.normals[i + 1] };
        Some((q, reference.clone()))
    }
}

fn plan_h_dir<P>(plan: &Plan<'_, P>, k: usize) -> DVector<f64> {
    h_unstable_signed(plan.source, plan.sign).column(k).into_owned()
}

impl<O: Objective + ?Sized> CascadeContext<'_, O> {
    /// Samples the forward circle family from `x` toward `y` at `n` evenly
    /// spaced angles. `None` unless the forward plan is a circle.
    pub fn scan_circle(&self, x: &HCriticalPoint<O::Point>, y: &HCriticalPoint<O::Point>, n: usize) -> Option<Vec<(f64, Probe)>> {
        let (_, plan) = self.plan(x, y, 1.0)?;
        if !matches!(plan.kind, PlanKind::NormalCircle | PlanKind::HCircle) {
            return None;
        }
        let ts: Vec<f64> = (0..n).map(|i| std::f64::consts::TAU * i as f64 / n as f64).collect();
        Some(ts.par_iter().map(|&t| (t, self.probe(&plan, 0, t))).collect())
    }
}
