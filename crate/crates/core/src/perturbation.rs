//! Holonomy perturbations built from slice coordinates.
//!
//! After tree gauge the only remaining symmetry is constant conjugation.
//! The conjugator `c` minimizes `D(c) = sum_e w_e |log r_e|^2` with
//! `r_e = c^-1 U0_e^-1 c U_e`; the first-order condition
//! `Phi(c) = sum_e w_e (Ad_{U_e} log r_e - log r_e) = 0` is the slice
//! condition. Slice coordinates are reported at the reference,
//! `alpha_e = c (log r_e) c^-1 = log(U0_e^-1 c U_e c^-1)`, so they are
//! unchanged when `A` is conjugated. A model perturbation is
//! `rho_k(|alpha|^2) <alpha, eta>`.
//!
//! Cutoff: `rho(r) = S((|r| - 1) / 3)` with the exponential smoothstep
//! `S(x) = psi(1 - x) / (psi(x) + psi(1 - x))`, `psi(x) = exp(-1/x)` for
//! `x > 0`. It equals 1 on `[-1, 1]`, vanishes outside `(-4, 4)` and has
//! slope at most 2/3. `rho_k(r) = rho(k^2 r)`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{dlog_right_matrix, Algebra, Group, GroupElement, DEFAULT_CUT_MARGIN};
use crate::flow::KERNEL_TOL;
use crate::objective::{metric_norm, spectrum, Objective};
use crate::ym::{angle_energy, stabilizer_dimension, Connection, Lattice, TangentField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbationError {
    #[error("connection outside the slice chart: {0}")]
    NotInDomain(String),
    #[error("reference connection is reducible (stabilizer dimension {0})")]
    Reducible(usize),
    #[error("reference connection is not tree-gauged")]
    NotTreeGauged,
    #[error("estimate needs at least 1000 samples (got {0})")]
    TooFewSamples(usize),
    #[error("malformed perturbation bank: {0}")]
    Malformed(String),
}

const SLICE_TOL: f64 = 1e-8;
const SLICE_MAX_ITER: usize = 200;

fn psi(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

fn psi_prime(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp() / (x * x)
    }
}

fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x >= 1.0 {
        0.0
    } else {
        let (a, b) = (psi(1.0 - x), psi(x));
        a / (a + b)
    }
}

fn smoothstep_prime(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let (a, b) = (psi(1.0 - x), psi(x));
    let (da, db) = (-psi_prime(1.0 - x), psi_prime(x));
    (da * b - a * db) / ((a + b) * (a + b))
}

/// Base cutoff `rho`.
pub fn rho(r: f64) -> f64 {
    smoothstep((r.abs() - 1.0) / 3.0)
}

pub fn rho_prime(r: f64) -> f64 {
    smoothstep_prime((r.abs() - 1.0) / 3.0) / 3.0 * r.signum()
}

/// `rho_k(r) = rho(k^2 r)`.
pub fn cutoff(r: f64, k: u32) -> f64 {
    rho((k * k) as f64 * r)
}

/// Derivative of [`cutoff`] in `r`.
pub fn cutoff_prime(r: f64, k: u32) -> f64 {
    let k2 = (k * k) as f64;
    k2 * rho_prime(k2 * r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceCoordinates {
    pub alpha: TangentField,
    pub c: GroupElement,
    /// Norm of the first-order optimality condition at `c`.
    pub residual: f64,
}

/// Internal per-free-edge slice data.
struct Slice {
    alpha: Vec<Algebra>,
    r: Vec<GroupElement>,
    c: GroupElement,
    residual: f64,
}

fn mat(a: &Algebra) -> Vector3<f64> {
    Vector3::new(a.0[0], a.0[1], a.0[2])
}

fn alg(v: &Vector3<f64>) -> Algebra {
    Algebra([v[0], v[1], v[2]])
}

fn hat(a: &Algebra) -> Matrix3<f64> {
    let [x, y, z] = a.0;
    Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0)
}

fn pinv3(m: &Matrix3<f64>) -> Matrix3<f64> {
    m.try_inverse().unwrap_or_else(|| m.pseudo_inverse(1e-12).unwrap_or_else(|_| Matrix3::zeros()))
}

fn weighted_free(lattice: &Lattice) -> Vec<(usize, f64)> {
    lattice.free_edges().iter().map(|&e| (e, lattice.complex.edge_weights[e])).collect()
}

fn slice_data(lattice: &Lattice, a: &Connection, a0: &Connection, c: GroupElement) -> (Vec<GroupElement>, Vec<Algebra>) {
    let ci = c.inverse();
    lattice
        .free_edges()
        .iter()
        .map(|&e| {
            let r = ci.mul(&a0.edges[e].inverse()).mul(&c).mul(&a.edges[e]);
            (r, r.log_unchecked())
        })
        .unzip()
}

fn orbit_distance_sq(lattice: &Lattice, alpha: &[Algebra]) -> f64 {
    weighted_free(lattice).iter().zip(alpha).map(|((_, w), a)| w * a.dot(a)).sum()
}

fn optimality(lattice: &Lattice, a: &Connection, alpha: &[Algebra]) -> Vector3<f64> {
    weighted_free(lattice)
        .iter()
        .zip(alpha)
        .map(|(&(e, w), al)| (mat(&a.edges[e].ad_inv(al)) - mat(al)) * w)
        .sum()
}

/// `d Phi / d c` in the right-trivialized chart `c exp(Z)`.
fn optimality_jacobian(lattice: &Lattice, a: &Connection, r: &[GroupElement], alpha: &[Algebra]) -> Matrix3<f64> {
    weighted_free(lattice)
        .iter()
        .zip(r.iter().zip(alpha))
        .map(|(&(e, w), (re, al))| {
            let u = a.edges[e];
            let delta = u.ad_matrix() - re.ad_matrix();
            (u.ad_matrix().transpose() - Matrix3::identity()) * dlog_right_matrix(al) * delta * w
        })
        .sum()
}

fn solve_slice(lattice: &Lattice, a: &Connection, a0: &Connection, margin: f64) -> Result<Slice, PerturbationError> {
    if lattice.group.is_abelian() {
        let mut alpha = Vec::new();
        let mut r = Vec::new();
        for &e in lattice.free_edges() {
            let d = a0.edges[e].inverse().mul(&a.edges[e]);
            let t = d.u1_angle();
            if t.abs() > std::f64::consts::PI - margin {
                return Err(PerturbationError::NotInDomain(format!("edge {e} at the cut locus")));
            }
            alpha.push(Algebra([t, 0.0, 0.0]));
            r.push(d);
        }
        return Ok(Slice { alpha, r, c: GroupElement::IDENTITY, residual: 0.0 });
    }
    let starts = std::iter::once(GroupElement::IDENTITY)
        .chain((0..3).map(|k| GroupElement::exp(&Algebra::e(k).scale(std::f64::consts::FRAC_PI_2))));
    let mut last = String::new();
    for c0 in starts {
        match newton_slice(lattice, a, a0, c0) {
            Ok(s) => {
                for (&e, r) in lattice.free_edges().iter().zip(&s.r) {
                    if r.log(Group::Su2, margin).is_err() {
                        return Err(PerturbationError::NotInDomain(format!("edge {e} at the cut locus")));
                    }
                }
                return Ok(s);
            }
            Err(msg) => last = msg,
        }
    }
    Err(PerturbationError::NotInDomain(last))
}

fn newton_slice(lattice: &Lattice, a: &Connection, a0: &Connection, mut c: GroupElement) -> Result<Slice, String> {
    let total_w: f64 = weighted_free(lattice).iter().map(|(_, w)| w).sum();
    for _ in 0..SLICE_MAX_ITER {
        let (r, alpha) = slice_data(lattice, a, a0, c);
        let phi = optimality(lattice, a, &alpha);
        if phi.norm() <= SLICE_TOL {
            return Ok(Slice { alpha, r, c, residual: phi.norm() });
        }
        let d0 = orbit_distance_sq(lattice, &alpha);
        let jac = optimality_jacobian(lattice, a, &r, &alpha);
        let sym = (jac + jac.transpose()) * 0.5;
        let newton = sym.symmetric_eigenvalues().min() > 1e-10;
        let step = if newton { -(pinv3(&jac) * phi) } else { -phi / total_w.max(1e-300) };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = c.right_exp(&alg(&(step * t)));
            let (_, al) = slice_data(lattice, a, a0, cand);
            let d1 = orbit_distance_sq(lattice, &al);
            if d1 <= d0 + 1e-14 * (1.0 + d0) || optimality(lattice, a, &al).norm() < phi.norm() {
                c = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(format!("slice minimization stalled at residual {:.3e}", phi.norm()));
        }
    }
    let (r, alpha) = slice_data(lattice, a, a0, c);
    let res = optimality(lattice, a, &alpha).norm();
    if res <= SLICE_TOL {
        Ok(Slice { alpha, r, c, residual: res })
    } else {
        Err(format!("slice minimization did not converge (residual {res:.3e})"))
    }
}

/// Slice coordinates of `a` relative to `a0` (both tree-gauged).
pub fn slice_coordinates(lattice: &Lattice, a: &Connection, a0: &Connection) -> Result<SliceCoordinates, PerturbationError> {
    let s = solve_slice(lattice, a, a0, DEFAULT_CUT_MARGIN)?;
    let mut alpha = lattice.zero_field();
    for (&e, al) in lattice.free_edges().iter().zip(&s.alpha) {
        alpha.values[e] = s.c.ad_inv(al);
    }
    Ok(SliceCoordinates { alpha, c: s.c, residual: s.residual })
}

/// Orbit-direction fields `xi_e = Z - Ad_{U_e} Z` of infinitesimal constant
/// conjugation at `a`, one per algebra basis vector.
pub fn orbit_directions(lattice: &Lattice, a: &Connection) -> Vec<TangentField> {
    if lattice.group.is_abelian() {
        return Vec::new();
    }
    (0..3)
        .map(|k| {
            let z = Algebra::e(k);
            let mut f = lattice.zero_field();
            for &e in lattice.free_edges() {
                f.values[e] = z.sub(&a.edges[e].ad(&z));
            }
            f
        })
        .collect()
}

/// Removes the orbit-direction components of `eta` (weighted Gram-Schmidt).
pub fn project_to_slice(lattice: &Lattice, a0: &Connection, eta: &TangentField) -> TangentField {
    let mut basis: Vec<TangentField> = Vec::new();
    for mut d in orbit_directions(lattice, a0) {
        for b in &basis {
            let p = d.inner(b, &lattice.complex);
            d.add_scaled(b, -p);
        }
        let n = d.norm_sq(&lattice.complex).sqrt();
        if n > 1e-10 {
            for v in d.values.iter_mut() {
                *v = v.scale(1.0 / n);
            }
            basis.push(d);
        }
    }
    let mut out = eta.clone();
    for b in &basis {
        let p = out.inner(b, &lattice.complex);
        out.add_scaled(b, -p);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPerturbation {
    pub reference: Connection,
    pub eta: TangentField,
    pub k: u32,
    pub constant: f64,
}

impl ModelPerturbation {
    /// Validates the reference and projects `eta` onto the slice tangent.
    pub fn new(lattice: &Lattice, reference: Connection, eta: TangentField, k: u32) -> Result<Self, PerturbationError> {
        if lattice.tree.tree_edges.iter().any(|&e| (reference.edges[e].0[0] - 1.0).abs() > 1e-12) {
            return Err(PerturbationError::NotTreeGauged);
        }
        if !lattice.group.is_abelian() {
            let stab = stabilizer_dimension(lattice, &reference);
            if stab != 0 {
                return Err(PerturbationError::Reducible(stab));
            }
        }
        let mut eta = project_to_slice(lattice, &reference, &eta);
        for (v, &on) in eta.values.iter_mut().zip(&lattice.free_mask()) {
            *v = if on { lattice.group.project(v) } else { Algebra::ZERO };
        }
        Ok(Self { reference, eta, k: k.max(1), constant: 0.0 })
    }

    /// Haar reference point and a unit-norm random direction.
    pub fn random(lattice: &Lattice, k: u32, rng: &mut dyn RngCore) -> Self {
        loop {
            let reference = lattice.random_connection(rng);
            let mut eta = lattice.zero_field();
            for &e in lattice.free_edges() {
                eta.values[e] = lattice.group.random_algebra(rng, 1.0);
            }
            if let Ok(mut m) = Self::new(lattice, reference, eta, k) {
                let n = m.eta.norm_sq(&lattice.complex).sqrt();
                if n > 1e-6 {
                    for v in m.eta.values.iter_mut() {
                        *v = v.scale(1.0 / n);
                    }
                    return m;
                }
            }
        }
    }

    pub fn support_radius(&self) -> f64 {
        2.0 / self.k as f64
    }

    /// `c^-1 eta c` on the free edges.
    fn eta_at(&self, lattice: &Lattice, c: GroupElement) -> Vec<Algebra> {
        lattice.free_edges().iter().map(|&e| c.ad(&self.eta.values[e])).collect()
    }

    fn evaluate(&self, lattice: &Lattice, a: &Connection) -> Result<Option<(Slice, f64, f64, f64)>, PerturbationError> {
        let s = solve_slice(lattice, a, &self.reference, DEFAULT_CUT_MARGIN)?;
        let n2 = orbit_distance_sq(lattice, &s.alpha);
        if n2.sqrt() >= self.support_radius() {
            return Ok(None);
        }
        let eta = self.eta_at(lattice, s.c);
        let pair: f64 = weighted_free(lattice).iter().zip(s.alpha.iter().zip(&eta)).map(|((_, w), (al, et))| w * al.dot(et)).sum();
        Ok(Some((s, n2, pair, cutoff(n2, self.k))))
    }

    /// `rho_k(|alpha|^2) <alpha, eta>`; zero outside the chart or the support.
    pub fn value(&self, lattice: &Lattice, a: &Connection) -> Result<f64, PerturbationError> {
        Ok(self.evaluate(lattice, a)?.map_or(0.0, |(_, _, pair, rho)| rho * pair))
    }

    /// Metric gradient, including the implicit dependence of `c` on `a`.
    pub fn gradient(&self, lattice: &Lattice, a: &Connection) -> Result<TangentField, PerturbationError> {
        let mut out = lattice.zero_field();
        let Some((s, n2, pair, rho)) = self.evaluate(lattice, a)? else {
            return Ok(out);
        };
        let drho = cutoff_prime(n2, self.k);
        let eta = self.eta_at(lattice, s.c);
        let wf = weighted_free(lattice);
        let avec: Vec<Vector3<f64>> = wf
            .iter()
            .zip(s.alpha.iter().zip(&eta))
            .map(|(&(_, w), (al, et))| mat(al) * (2.0 * drho * pair * w) + mat(et) * (rho * w))
            .collect();
        if lattice.group.is_abelian() {
            for ((&(e, w), av), o) in wf.iter().zip(&avec).zip(0..) {
                let _ = o;
                out.values[e] = Algebra([av[0] / w, 0.0, 0.0]);
            }
            return Ok(out);
        }
        let jac: Vec<Matrix3<f64>> = s.alpha.iter().map(dlog_right_matrix).collect();
        let mut b = Vector3::zeros();
        for (i, &(e, _)) in wf.iter().enumerate() {
            let delta = a.edges[e].ad_matrix() - s.r[i].ad_matrix();
            b += delta.transpose() * jac[i].transpose() * avec[i];
            // eta is carried along by the conjugator
            b += mat(&s.alpha[i].cross(&eta[i])) * (2.0 * rho * wf[i].1);
        }
        let mc = optimality_jacobian(lattice, a, &s.r, &s.alpha);
        let lam = pinv3(&mc.transpose()) * b;
        for (i, &(e, w)) in wf.iter().enumerate() {
            let ad_inv = a.edges[e].ad_matrix().transpose();
            let mu = (ad_inv * hat(&s.alpha[i]) * -2.0 + (ad_inv - Matrix3::identity()) * jac[i]) * w;
            let raw = jac[i].transpose() * avec[i] - mu.transpose() * lam;
            out.values[e] = alg(&(raw / w));
        }
        Ok(out)
    }

    /// Weighted slice distance `|alpha|` between `a` and the reference.
    pub fn slice_distance(&self, lattice: &Lattice, a: &Connection) -> f64 {
        match solve_slice(lattice, a, &self.reference, DEFAULT_CUT_MARGIN) {
            Ok(s) => orbit_distance_sq(lattice, &s.alpha).sqrt(),
            Err(_) => relaxed_distance(lattice, a, &self.reference),
        }
    }
}

/// Orbit distance without the chart guard: minimum over a grid of
/// conjugators of the unchecked-log distance, polished by descent.
fn relaxed_distance(lattice: &Lattice, a: &Connection, a0: &Connection) -> f64 {
    let mut best = f64::INFINITY;
    let n = 6;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let z = Algebra([i as f64, j as f64, k as f64]).scale(std::f64::consts::PI / n as f64);
                let c = GroupElement::exp(&lattice.group.project(&z));
                let (_, al) = slice_data(lattice, a, a0, c);
                best = best.min(orbit_distance_sq(lattice, &al));
                if lattice.group.is_abelian() {
                    return best.sqrt();
                }
            }
        }
    }
    best.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankTerm {
    pub perturbation: ModelPerturbation,
    pub lambda: f64,
}

/// Finite linear combination of model perturbations.
#[derive(Debug, Clone, Default)]
pub struct PerturbationBank {
    pub terms: Vec<BankTerm>,
    not_in_domain: Arc<AtomicUsize>,
}

impl PartialEq for PerturbationBank {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankTermDocument {
    pub group: Group,
    pub reference: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub k: u32,
    pub lambda: f64,
    #[serde(rename = "C")]
    pub constant: f64,
}

impl PerturbationBank {
    pub fn new(terms: Vec<BankTerm>) -> Self {
        Self { terms, not_in_domain: Arc::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.iter().all(|t| t.lambda == 0.0)
    }

    /// `sum_l C_l |lambda_l|`.
    pub fn norm(&self) -> f64 {
        self.terms.iter().map(|t| t.perturbation.constant * t.lambda.abs()).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.terms.iter().map(|t| BankTerm { lambda: t.lambda * s, ..t.clone() }).collect())
    }

    pub fn concat(&self, other: &Self) -> Self {
        Self::new(self.terms.iter().chain(&other.terms).cloned().collect())
    }

    /// Number of slice solves that left the chart since construction.
    pub fn not_in_domain_count(&self) -> usize {
        self.not_in_domain.load(Ordering::Relaxed)
    }

    fn active(&self) -> impl ParallelIterator<Item = &BankTerm> {
        self.terms.par_iter().filter(|t| t.lambda != 0.0)
    }

    fn note<T: Default>(&self, r: Result<T, PerturbationError>) -> T {
        r.unwrap_or_else(|_| {
            self.not_in_domain.fetch_add(1, Ordering::Relaxed);
            T::default()
        })
    }

    pub fn value(&self, lattice: &Lattice, a: &Connection) -> f64 {
        let parts: Vec<f64> = self.active().map(|t| t.lambda * self.note(t.perturbation.value(lattice, a))).collect();
        parts.iter().sum()
    }

    pub fn gradient(&self, lattice: &Lattice, a: &Connection) -> TangentField {
        let parts: Vec<(f64, Option<TangentField>)> =
            self.active().map(|t| (t.lambda, t.perturbation.gradient(lattice, a).ok())).collect();
        let mut out = lattice.zero_field();
        for (lambda, g) in parts {
            match g {
                Some(g) => out.add_scaled(&g, lambda),
                None => {
                    self.not_in_domain.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        out
    }

    /// True if some active term could be nonzero near `a`.
    pub fn touches(&self, lattice: &Lattice, a: &Connection) -> bool {
        self.terms
            .iter()
            .filter(|t| t.lambda != 0.0)
            .any(|t| t.perturbation.slice_distance(lattice, a) < t.perturbation.support_radius() + 1e-3)
    }

    /// Exponential-chart second derivatives of the bank, by central
    /// differences of the analytic gradient (symmetrized).
    pub fn hessian_fd(&self, lattice: &Lattice, a: &Connection, h: f64) -> DMatrix<f64> {
        let n = lattice.tangent_dim();
        let w = lattice.coordinate_weights();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut v = DVector::zeros(n);
            v[j] = h;
            let gp = lattice.flatten(&self.gradient(lattice, &lattice.retract(a, &lattice.unflatten(&v))));
            let gm = lattice.flatten(&self.gradient(lattice, &lattice.retract(a, &lattice.unflatten(&-v))));
            let col = (gp - gm).component_mul(&w) / (2.0 * h);
            m.set_column(j, &col);
        }
        (&m + m.transpose()) * 0.5
    }

    pub fn to_json(&self) -> String {
        let docs: Vec<BankTermDocument> = self
            .terms
            .iter()
            .map(|t| {
                let p = &t.perturbation;
                let g = p.reference.group;
                BankTermDocument {
                    group: g,
                    reference: p.reference.components(),
                    eta: p.eta.values.iter().map(|x| g.coefficients(x)).collect(),
                    k: p.k,
                    lambda: t.lambda,
                    constant: p.constant,
                }
            })
            .collect();
        serde_json::to_string_pretty(&docs).expect("bank serializes")
    }

    pub fn from_json(s: &str, lattice: &Lattice) -> Result<Self, PerturbationError> {
        let docs: Vec<BankTermDocument> = serde_json::from_str(s).map_err(|e| PerturbationError::Malformed(e.to_string()))?;
        let ne = lattice.complex.num_edges();
        let mut terms = Vec::new();
        for d in docs {
            if d.group != lattice.group || d.reference.len() != ne || d.eta.len() != ne {
                return Err(PerturbationError::Malformed("term does not match the lattice".into()));
            }
            let edges = d
                .reference
                .iter()
                .map(|c| {
                    let mut q = [0.0; 4];
                    for (i, x) in c.iter().take(4).enumerate() {
                        q[i] = *x;
                    }
                    GroupElement(q).renormalized()
                })
                .collect();
            let mut eta = lattice.zero_field();
            for (e, c) in d.eta.iter().enumerate() {
                if c.len() != d.group.dim() {
                    return Err(PerturbationError::Malformed("eta has the wrong dimension".into()));
                }
                eta.values[e] = d.group.from_coefficients(c);
            }
            let mut p = ModelPerturbation::new(lattice, Connection { group: d.group, edges }, eta, d.k)?;
            p.constant = d.constant;
            terms.push(BankTerm { perturbation: p, lambda: d.lambda });
        }
        Ok(Self::new(terms))
    }
}

/// Empirical surrogate for the constant `C_l`: twice the largest observed
/// `|V|`, `|grad V|` and `|grad V| / (1 + |F|)` over Haar samples, samples
/// inside the support ball and the supplied extra states (e.g. flow states).
pub fn estimate_constant(
    lattice: &Lattice,
    term: &ModelPerturbation,
    sample_count: usize,
    rng: &mut dyn RngCore,
    extra_states: &[Connection],
) -> Result<f64, PerturbationError> {
    if sample_count < 1000 {
        return Err(PerturbationError::TooFewSamples(sample_count));
    }
    let mut states: Vec<Connection> = extra_states.to_vec();
    let radius = term.support_radius();
    let d = lattice.tangent_dim().max(1) as f64;
    for i in 0..sample_count {
        if i % 2 == 0 {
            states.push(lattice.random_connection(rng));
        } else {
            let mut v = lattice.zero_field();
            for &e in lattice.free_edges() {
                v.values[e] = lattice.group.random_algebra(rng, radius / d.sqrt());
            }
            states.push(lattice.retract(&term.reference, &v));
        }
    }
    let sup = states
        .par_iter()
        .map(|s| {
            let v = term.value(lattice, s).unwrap_or(0.0).abs();
            let g = term.gradient(lattice, s).map(|g| g.norm_sq(&lattice.complex).sqrt()).unwrap_or(0.0);
            let f = (2.0 * angle_energy(&lattice.complex, s, DEFAULT_CUT_MARGIN).0).sqrt();
            v.max(g).max(g / (1.0 + f))
        })
        .reduce(|| 0.0, f64::max);
    Ok((2.0 * sup).max(1e-12))
}

/// True iff every active term's support ball stays `epsilon` away from
/// every critical representative.
pub fn is_admissible(lattice: &Lattice, bank: &PerturbationBank, critical: &[Connection], epsilon: f64) -> bool {
    bank.terms.iter().filter(|t| t.lambda != 0.0).all(|t| {
        critical
            .iter()
            .all(|x| t.perturbation.slice_distance(lattice, x) > t.perturbation.support_radius() + epsilon)
    })
}

/// Draws `n` random terms of cutoff index `k` whose supports avoid the
/// `epsilon`-neighbourhoods of `critical`, estimates their constants and
/// scales the bank to norm `target_norm`.
pub fn random_admissible_bank(
    lattice: &Lattice,
    n: usize,
    k: u32,
    critical: &[Connection],
    epsilon: f64,
    target_norm: f64,
    rng: &mut dyn RngCore,
) -> Result<PerturbationBank, PerturbationError> {
    let mut terms = Vec::new();
    for _ in 0..1000 * n.max(1) {
        if terms.len() == n {
            break;
        }
        let p = ModelPerturbation::random(lattice, k, rng);
        let candidate = PerturbationBank::new(vec![BankTerm { perturbation: p.clone(), lambda: 1.0 }]);
        if !is_admissible(lattice, &candidate, critical, epsilon) {
            continue;
        }
        let mut p = p;
        p.constant = estimate_constant(lattice, &p, 1000, rng, critical)?;
        let sign = if rng.next_u32().is_multiple_of(2) { 1.0 } else { -1.0 };
        let lambda = sign * target_norm / (n as f64 * p.constant);
        terms.push(BankTerm { perturbation: p, lambda });
    }
    if terms.len() < n {
        return Err(PerturbationError::Malformed(format!("found only {} admissible terms", terms.len())));
    }
    Ok(PerturbationBank::new(terms))
}

/// Smallest gradient norm over points at normal distance `radius` from the
/// given critical representatives (the normal directions are the Hessian
/// eigenvectors outside the kernel).
pub fn shell_gradient_floor<O: Objective + ?Sized>(obj: &O, critical: &[O::Point], radius: f64, per_point: usize, rng: &mut dyn RngCore) -> f64 {
    let metric = obj.metric();
    let mut floor = f64::INFINITY;
    for x in critical {
        let Ok(spec) = spectrum(obj, x) else { continue };
        let thr = spec.threshold(KERNEL_TOL);
        let normal: Vec<usize> = (0..spec.values.len()).filter(|&i| spec.values[i].abs() > thr).collect();
        if normal.is_empty() {
            continue;
        }
        let basis = spec.columns(&normal);
        for _ in 0..per_point {
            let c = DVector::from_fn(normal.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = obj.retract(x, &(&basis * (c.normalize() * radius)));
            if let Ok(g) = obj.gradient(&y) {
                floor = floor.min(metric_norm(&metric, &g));
            }
        }
    }
    floor
}
