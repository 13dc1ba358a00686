//! Negative gradient flow, critical-point polishing and decay analysis.
//!
//! Integration is classical RK4 in ambient tangent coordinates; every stage
//! point is reached through the objective's retraction, so iterates never
//! leave the configuration manifold.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{basis_coefficients, metric_dot, metric_norm, sorted_eigen, spectrum, Objective, ObjectiveError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NoConvergence { iterations: usize, gradient_norm: f64 },
    #[error("trajectory tail too short for a decay fit: {0}")]
    InsufficientTail(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowStatus {
    Converged,
    MaxTime,
    CutLocus,
    EnergyIncrease,
}

/// Step-size control and termination thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Controller {
    pub initial_step: f64,
    pub max_step: f64,
    pub min_step: f64,
    pub growth: f64,
    pub tol_g: f64,
    pub s_max: f64,
    pub max_steps: usize,
    /// Relative slack for the energy-decrease test.
    pub energy_slack: f64,
    pub max_jump: f64,
}

impl Default for Controller {
    fn default() -> Self {
        Self {
            initial_step: 0.05,
            max_step: 0.05,
            min_step: 1e-12,
            growth: 1.25,
            tol_g: 1e-10,
            s_max: 1e3,
            max_steps: 200_000,
            energy_slack: 1e-10,
            max_jump: std::f64::consts::FRAC_PI_4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<P> {
    pub times: Vec<f64>,
    pub points: Vec<P>,
    pub energies: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    pub status: FlowStatus,
}

impl<P> Trajectory<P> {
    pub fn last(&self) -> &P {
        self.points.last().expect("trajectory has a start point")
    }

    pub fn final_energy(&self) -> f64 {
        *self.energies.last().expect("trajectory has a start point")
    }

    pub fn final_gradient_norm(&self) -> f64 {
        *self.gradient_norms.last().expect("trajectory has a start point")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Largest energy increase between consecutive samples, relative to `1 + |E|`.
    pub fn max_energy_increase(&self) -> f64 {
        self.energies.windows(2).map(|w| (w[1] - w[0]) / (1.0 + w[0].abs())).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,E,gradnorm\n");
        for i in 0..self.times.len() {
            let _ = writeln!(out, "{:.17e},{:.17e},{:.17e}", self.times[i], self.energies[i], self.gradient_norms[i]);
        }
        out
    }
}

impl<P: Serialize> Trajectory<P> {
    /// Sidecar with the endpoints and termination status.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "status": self.status,
            "samples": self.times.len(),
            "final_time": self.times.last(),
            "start": {
                "point": self.points.first(),
                "energy": self.energies.first(),
                "gradient_norm": self.gradient_norms.first(),
            },
            "end": {
                "point": self.points.last(),
                "energy": self.energies.last(),
                "gradient_norm": self.gradient_norms.last(),
            },
        })
    }
}

fn neg_gradient<O: Objective + ?Sized>(obj: &O, p: &O::Point) -> Result<DVector<f64>, ObjectiveError> {
    Ok(-obj.gradient(p)?)
}

/// One RK4 step of size `h`; stage points are retractions from `p`.
fn rk4_step<O: Objective + ?Sized>(obj: &O, p: &O::Point, k1: &DVector<f64>, h: f64) -> Result<O::Point, ObjectiveError> {
    let k2 = neg_gradient(obj, &obj.retract(p, &(k1 * (0.5 * h))))?;
    let k3 = neg_gradient(obj, &obj.retract(p, &(&k2 * (0.5 * h))))?;
    let k4 = neg_gradient(obj, &obj.retract(p, &(&k3 * h)))?;
    let incr = (k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (h / 6.0);
    Ok(obj.retract(p, &incr))
}

/// Integrates `dp/ds = -grad f(p)` from `start`.
pub fn integrate<O: Objective + ?Sized>(obj: &O, start: &O::Point, ctl: &Controller) -> Result<Trajectory<O::Point>, FlowError> {
    let metric = obj.metric();
    let mut p = start.clone();
    let mut e = obj.value(&p)?;
    let mut g = obj.gradient(&p)?;
    let mut gn = metric_norm(&metric, &g);
    let mut traj = Trajectory { times: vec![0.0], points: vec![p.clone()], energies: vec![e], gradient_norms: vec![gn], status: FlowStatus::MaxTime };
    let mut s = 0.0;
    let mut h = ctl.initial_step.min(ctl.max_step);
    let mut steps = 0;
    loop {
        if gn < ctl.tol_g {
            traj.status = FlowStatus::Converged;
            return Ok(traj);
        }
        if s >= ctl.s_max || steps >= ctl.max_steps {
            traj.status = FlowStatus::MaxTime;
            return Ok(traj);
        }
        let k1 = -&g;
        let h_try = h.min(ctl.s_max - s).max(ctl.min_step);
        let attempt = rk4_step(obj, &p, &k1, h_try).and_then(|q| {
            let eq = obj.value(&q)?;
            Ok((q, eq))
        });
        let (q, eq) = match attempt {
            Ok(v) => v,
            Err(ObjectiveError::CutLocus(_)) => {
                if h_try <= ctl.min_step {
                    traj.status = FlowStatus::CutLocus;
                    return Ok(traj);
                }
                h = h_try * 0.5;
                continue;
            }
            Err(err) => return Err(err.into()),
        };
        let rises = eq > e + ctl.energy_slack * (1.0 + e.abs());
        let jumps = obj.step_jump(&p, &q) > ctl.max_jump;
        if rises || jumps {
            if h_try <= ctl.min_step {
                traj.status = FlowStatus::EnergyIncrease;
                return Ok(traj);
            }
            h = h_try * 0.5;
            continue;
        }
        let gq = match obj.gradient(&q) {
            Ok(v) => v,
            Err(ObjectiveError::CutLocus(_)) => {
                traj.status = FlowStatus::CutLocus;
                return Ok(traj);
            }
            Err(err) => return Err(err.into()),
        };
        s += h_try;
        steps += 1;
        p = q;
        e = eq;
        g = gq;
        gn = metric_norm(&metric, &g);
        traj.times.push(s);
        traj.points.push(p.clone());
        traj.energies.push(e);
        traj.gradient_norms.push(gn);
        h = (h_try * ctl.growth).min(ctl.max_step);
    }
}

/// Independent flows over many starts, returned in input order.
pub fn integrate_many<O: Objective + ?Sized>(obj: &O, starts: &[O::Point], ctl: &Controller) -> Vec<Result<Trajectory<O::Point>, FlowError>> {
    starts.par_iter().map(|s| integrate(obj, s, ctl)).collect()
}

pub const REFINE_MAX_ITER: usize = 50;
pub const REFINE_TOL: f64 = 1e-11;
pub const KERNEL_TOL: f64 = 1e-6;

/// Newton polish on the complement of the numerical Hessian kernel.
pub fn refine_critical<O: Objective + ?Sized>(obj: &O, guess: &O::Point) -> Result<O::Point, FlowError> {
    let metric = obj.metric();
    let g0 = metric_norm(&metric, &obj.gradient(guess)?);
    if g0 >= 1e-3 {
        return Err(FlowError::PreconditionViolated(format!("gradient norm {g0:.3e} is not below 1e-3")));
    }
    refine_unchecked(obj, guess, REFINE_TOL, REFINE_MAX_ITER)
}

pub(crate) fn refine_unchecked<O: Objective + ?Sized>(obj: &O, guess: &O::Point, tol: f64, max_iter: usize) -> Result<O::Point, FlowError> {
    let metric = obj.metric();
    let mut p = guess.clone();
    let mut g = obj.gradient(&p)?;
    let mut gn = metric_norm(&metric, &g);
    for _ in 0..max_iter {
        if gn < tol {
            return Ok(p);
        }
        let basis = obj.tangent_basis(&p);
        let spec = sorted_eigen(&obj.hessian(&p)?, &DMatrix::identity(basis.ncols(), basis.ncols()));
        let gb = basis_coefficients(&metric, &basis, &g);
        let thr = spec.threshold(KERNEL_TOL);
        let mut step_b = DVector::zeros(basis.ncols());
        for (i, &lam) in spec.values.iter().enumerate() {
            if lam.abs() > thr {
                let v = spec.vectors.column(i);
                step_b -= v * (v.dot(&gb) / lam);
            }
        }
        let step = &basis * step_b;
        // backtrack on the gradient norm
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..20 {
            let q = obj.retract(&p, &(&step * t));
            let gq = obj.gradient(&q)?;
            let nq = metric_norm(&metric, &gq);
            if nq < gn || nq < tol {
                next = Some((q, gq, nq));
                break;
            }
            t *= 0.5;
        }
        match next {
            Some((q, gq, nq)) => {
                p = q;
                g = gq;
                gn = nq;
            }
            None => break,
        }
    }
    if gn < tol {
        Ok(p)
    } else {
        Err(FlowError::NoConvergence { iterations: max_iter, gradient_norm: gn })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    /// Time window `[s_start, s_end]` of the fitted tail.
    pub window: (f64, f64),
    pub correlation: f64,
    pub samples: usize,
    /// Smallest positive eigenvalue of the limit Hessian off its kernel.
    pub spectral_gap: f64,
    pub agrees: bool,
    /// Some kernel-adjacent eigenvalue lies within 10x of the gap.
    pub near_kernel: bool,
    pub limit_id: Option<usize>,
}

/// Tail thresholds for [`decay_fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayWindow {
    pub upper: f64,
    pub lower: f64,
    pub min_samples: usize,
}

impl Default for DecayWindow {
    fn default() -> Self {
        Self { upper: 1e-3, lower: 1e-9, min_samples: 5 }
    }
}

/// Least-squares slope of `log |grad|` on the tail, compared with the
/// spectral gap of `hessian_eigenvalues` (the limit Hessian spectrum).
pub fn decay_fit<P>(traj: &Trajectory<P>, hessian_eigenvalues: &[f64], window: DecayWindow) -> Result<DecayFit, FlowError> {
    if traj.status != FlowStatus::Converged {
        return Err(FlowError::InsufficientTail(format!("trajectory ended with {:?}", traj.status)));
    }
    let pts: Vec<(f64, f64)> = traj
        .times
        .iter()
        .zip(&traj.gradient_norms)
        .filter(|(_, &g)| g < window.upper && g > window.lower)
        .map(|(&s, &g)| (s, g.ln()))
        .collect();
    if pts.len() < window.min_samples {
        return Err(FlowError::InsufficientTail(format!("{} samples below {:.1e}", pts.len(), window.upper)));
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(FlowError::InsufficientTail("degenerate tail".into()));
    }
    let rate = -sxy / sxx;
    let correlation = (sxy / (sxx * syy).sqrt()).abs();
    let rho = hessian_eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let thr = KERNEL_TOL * rho.max(1.0);
    let gap = hessian_eigenvalues.iter().copied().filter(|&v| v > thr).fold(f64::INFINITY, f64::min);
    let near_kernel = hessian_eigenvalues.iter().any(|&v| v.abs() <= thr && v.abs() * 10.0 >= gap && v != 0.0)
        || hessian_eigenvalues.iter().any(|&v| v > thr && v < gap * 10.0 && v.abs() < 1e-3);
    Ok(DecayFit {
        rate,
        window: (pts[0].0, pts[pts.len() - 1].0),
        correlation,
        samples: pts.len(),
        spectral_gap: gap,
        agrees: gap.is_finite() && ((rate - gap) / gap).abs() <= 0.1,
        near_kernel,
        limit_id: None,
    })
}

/// Flows out of the critical point `x` from `retract(x, epsilon * direction)`.
/// `direction` must be a metric-unit vector in the negative eigenspace.
pub fn shoot_unstable<O: Objective + ?Sized>(
    obj: &O,
    x: &O::Point,
    direction: &DVector<f64>,
    epsilon: f64,
    ctl: &Controller,
) -> Result<Trajectory<O::Point>, FlowError> {
    let metric = obj.metric();
    let n = metric_norm(&metric, direction);
    if (n - 1.0).abs() > 1e-8 {
        return Err(FlowError::PreconditionViolated(format!("direction has norm {n}")));
    }
    let spec = spectrum(obj, x)?;
    let neg = spec.negative_indices(KERNEL_TOL);
    let mut residual = direction.clone();
    for &i in &neg {
        let v = spec.vectors.column(i).into_owned();
        residual -= &v * metric_dot(&metric, &v, direction);
    }
    let contamination = metric_norm(&metric, &residual);
    if contamination > 1e-6 {
        return Err(FlowError::PreconditionViolated(format!("direction leaves the unstable space by {contamination:.3e}")));
    }
    let start = if epsilon == 0.0 { x.clone() } else { obj.retract(x, &(direction * epsilon)) };
    integrate(obj, &start, ctl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{Group, GroupElement};
    use crate::surface::OrientedCellComplex;
    use crate::ym::{apply_gauge, Connection, EnergyBackend, GaugeTransform, Lattice, YangMills};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn u1_grid() -> YangMills {
        YangMills::new(Lattice::new(OrientedCellComplex::torus_grid(2, 1).unwrap(), Group::U1).unwrap(), EnergyBackend::Wilson)
    }

    fn su2_genus2() -> YangMills {
        YangMills::new(Lattice::new(OrientedCellComplex::minimal_genus(2).unwrap(), Group::Su2).unwrap(), EnergyBackend::Wilson)
    }

    fn jitter(ym: &YangMills, base: &Connection, scale: f64, rng: &mut ChaCha8Rng) -> Connection {
        let l = &ym.lattice;
        let mut v = l.zero_field();
        for &e in l.free_edges() {
            v.values[e] = l.group.random_algebra(rng, scale);
        }
        l.retract(base, &v)
    }

    #[test]
    fn critical_start_is_constant() {
        let ym = u1_grid();
        let t = integrate(&ym, &ym.base_point(), &Controller::default()).unwrap();
        assert_eq!(t.status, FlowStatus::Converged);
        assert_eq!(t.len(), 1);
        assert_eq!(t.times, vec![0.0]);
    }

    #[test]
    fn small_u1_start_reaches_flat_and_decays_at_the_gap() {
        let ym = u1_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let start = jitter(&ym, &ym.base_point(), 0.3, &mut rng);
        let t = integrate(&ym, &start, &Controller::default()).unwrap();
        assert_eq!(t.status, FlowStatus::Converged);
        assert!(t.final_energy() < 1e-12);
        assert!(t.max_energy_increase() <= 1e-10);
        let eig = spectrum(&ym, t.last()).unwrap().values;
        let fit = decay_fit(&t, &eig, DecayWindow::default()).unwrap();
        // flat Hessian of the (2,1) grid: one positive eigenvalue 2 * |D^T D| = 8
        assert!((fit.spectral_gap - 8.0).abs() < 1e-6);
        assert!(fit.agrees, "{fit:?}");
        assert!(fit.correlation >= 0.99);
    }

    #[test]
    fn energy_is_monotone_on_random_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ym = su2_genus2();
        let ctl = Controller { s_max: 20.0, ..Controller::default() };
        let starts: Vec<Connection> = (0..50).map(|_| ym.lattice.random_connection(&mut rng)).collect();
        for t in integrate_many(&ym, &starts, &ctl) {
            let t = t.unwrap();
            assert!(t.max_energy_increase() <= 1e-10);
            assert!(t.times.windows(2).all(|w| w[1] > w[0]));
            assert!(t.points.iter().all(|p| p.max_modulus_error() < 1e-12));
        }
    }

    #[test]
    fn flows_are_deterministic_and_conjugation_equivariant() {
        let ym = su2_genus2();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = ym.lattice.random_connection(&mut rng);
        let ctl = Controller { s_max: 5.0, ..Controller::default() };
        let a = integrate(&ym, &start, &ctl).unwrap();
        let b = integrate(&ym, &start, &ctl).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.points, b.points);

        let c = Group::Su2.haar(&mut rng);
        let conj = |p: &Connection| apply_gauge(&ym.lattice.complex, p, &GaugeTransform::constant(1, c));
        let moved = integrate(&ym, &conj(&start), &ctl).unwrap();
        assert_eq!(moved.times.len(), a.times.len());
        for (p, q) in a.points.iter().zip(&moved.points) {
            let expected = conj(p);
            for (x, y) in expected.edges.iter().zip(&q.edges) {
                assert!(x.0.iter().zip(y.0).all(|(u, v)| (u - v).abs() < 1e-8));
            }
        }
    }

    #[test]
    fn refine_examples() {
        let ym = u1_grid();
        let flat = ym.base_point();
        assert_eq!(refine_critical(&ym, &flat).unwrap(), flat);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = jitter(&ym, &flat, 1e-4, &mut rng);
        let r = refine_critical(&ym, &noisy).unwrap();
        assert!(metric_norm(&ym.metric(), &ym.gradient(&r).unwrap()) < 1e-11);
        let rough = jitter(&ym, &flat, 0.05, &mut rng);
        assert!(metric_norm(&ym.metric(), &ym.gradient(&rough).unwrap()) > 1e-3);
        assert!(matches!(refine_critical(&ym, &rough), Err(FlowError::PreconditionViolated(_))));
    }

    #[test]
    fn decay_fit_requires_convergence() {
        let ym = u1_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let start = jitter(&ym, &ym.base_point(), 0.3, &mut rng);
        let t = integrate(&ym, &start, &Controller { s_max: 0.1, ..Controller::default() }).unwrap();
        assert_eq!(t.status, FlowStatus::MaxTime);
        assert!(matches!(decay_fit(&t, &[8.0], DecayWindow::default()), Err(FlowError::InsufficientTail(_))));
    }

    #[test]
    fn shooting_preconditions() {
        let ym = YangMills::new(Lattice::new(OrientedCellComplex::minimal_genus(1).unwrap(), Group::Su2).unwrap(), EnergyBackend::Wilson);
        let top = Connection { group: Group::Su2, edges: vec![GroupElement([0.0, 1.0, 0.0, 0.0]), GroupElement([0.0, 0.0, 1.0, 0.0])] };
        let spec = spectrum(&ym, &top).unwrap();
        let neg = spec.negative_indices(KERNEL_TOL);
        assert!(!neg.is_empty());
        let d = spec.vectors.column(neg[0]).into_owned();
        let t = shoot_unstable(&ym, &top, &d, 0.0, &Controller::default()).unwrap();
        assert_eq!(t.len(), 1);
        let t = shoot_unstable(&ym, &top, &d, 1e-4, &Controller::default()).unwrap();
        assert_eq!(t.status, FlowStatus::Converged);
        assert!(t.final_energy() < 1e-12);
        // the top level has no positive directions; contaminate with a null one
        let null = spec.kernel_indices(KERNEL_TOL);
        let mut bad = &d + spec.vectors.column(null[0]) * 0.1;
        bad /= metric_norm(&ym.metric(), &bad);
        assert!(matches!(shoot_unstable(&ym, &top, &bad, 1e-4, &Controller::default()), Err(FlowError::PreconditionViolated(_))));
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let ym = u1_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let start = jitter(&ym, &ym.base_point(), 0.3, &mut rng);
        let t = integrate(&ym, &start, &Controller { s_max: 1.0, ..Controller::default() }).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("s,E,gradnorm\n"));
        assert_eq!(csv.lines().count(), t.len() + 1);
        let js = t.summary_json();
        assert_eq!(js["samples"], t.len());
    }
}
