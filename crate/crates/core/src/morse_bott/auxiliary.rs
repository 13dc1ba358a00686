//! Auxiliary Morse functions on critical manifolds.
//!
//! `h` is a fixed random linear combination of the objective's ambient
//! observables, restricted to a critical manifold `C`. The tangent space of
//! `C` is taken numerically from the Hessian kernel and points are pulled
//! back onto `C` by Newton refinement of the objective's gradient.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::Serialize;

use super::survey::CriticalManifold;
use super::MorseBottError;
use crate::flow::{refine_unchecked, REFINE_MAX_ITER, REFINE_TOL};
use crate::objective::{metric_dot, spectrum, Objective};

/// Largest h-gradient accepted at an h-critical point.
pub const H_GRAD_TOL: f64 = 1e-10;
/// Smallest |eigenvalue| of the intrinsic h-Hessian at a Morse point.
pub const H_NONDEGENERACY: f64 = 1e-6;
pub const MAX_H_ATTEMPTS: usize = 10;
const FD_STEP: f64 = 1e-4;
const DEDUPE_DISTANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MorseFunction {
    pub coefficients: Vec<f64>,
}

impl MorseFunction {
    pub fn random(len: usize, rng: &mut dyn RngCore) -> Self {
        Self { coefficients: (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() }
    }

    pub fn value<O: Objective + ?Sized>(&self, obj: &O, p: &O::Point) -> f64 {
        obj.observables(p).iter().zip(&self.coefficients).map(|(o, c)| o * c).sum()
    }

    /// Differential along ambient tangent coordinates.
    pub fn differential<O: Objective + ?Sized>(&self, obj: &O, p: &O::Point) -> DVector<f64> {
        obj.observable_jacobian(p).tr_mul(&DVector::from_column_slice(&self.coefficients))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HCriticalPoint<P> {
    pub manifold: usize,
    pub point: P,
    pub h_value: f64,
    pub ind_ym: usize,
    pub ind_h: usize,
    /// Eigenvalues of the intrinsic h-Hessian, ascending.
    pub h_eigenvalues: Vec<f64>,
    /// Matching ambient eigenvectors (columns).
    #[serde(skip)]
    pub h_directions: DMatrix<f64>,
}

impl<P> HCriticalPoint<P> {
    #[allow(non_snake_case)]
    pub fn Ind(&self) -> usize {
        self.ind_ym + self.ind_h
    }

    /// Ambient unit directions along which h decreases.
    pub fn h_unstable(&self) -> DMatrix<f64> {
        self.h_directions.columns(0, self.ind_h).into_owned()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuxiliaryMorse<P> {
    pub manifold: usize,
    pub dim: usize,
    pub function: MorseFunction,
    pub points: Vec<HCriticalPoint<P>>,
    pub attempts: usize,
}

/// Geometry of one critical manifold seen through an objective.
pub struct ManifoldView<'a, O: Objective + ?Sized> {
    pub obj: &'a O,
    pub dim: usize,
}

impl<'a, O: Objective + ?Sized> ManifoldView<'a, O> {
    pub fn new(obj: &'a O, dim: usize) -> Self {
        Self { obj, dim }
    }

    pub fn project(&self, p: &O::Point) -> Option<O::Point> {
        refine_unchecked(self.obj, p, REFINE_TOL, REFINE_MAX_ITER).ok()
    }

    /// Metric-orthonormal ambient frame of the numerical tangent space:
    /// the `dim` Hessian eigenvectors of smallest modulus.
    pub fn frame(&self, p: &O::Point) -> DMatrix<f64> {
        let n = self.obj.ambient_dim();
        if self.dim == 0 {
            return DMatrix::zeros(n, 0);
        }
        let Ok(spec) = spectrum(self.obj, p) else { return DMatrix::zeros(n, 0) };
        let mut idx: Vec<usize> = (0..spec.values.len()).collect();
        idx.sort_by(|&a, &b| spec.values[a].abs().total_cmp(&spec.values[b].abs()));
        idx.truncate(self.dim);
        spec.columns(&idx)
    }

    /// Frame at `q` rotated to best match `reference` (polar projection).
    pub fn aligned_frame(&self, q: &O::Point, reference: &DMatrix<f64>) -> DMatrix<f64> {
        let f = self.frame(q);
        if f.ncols() == 0 || f.ncols() != reference.ncols() {
            return f;
        }
        let g = self.obj.metric();
        let m = f.tr_mul(&DMatrix::from_fn(reference.nrows(), reference.ncols(), |i, j| g[i] * reference[(i, j)]));
        let svd = m.svd(true, true);
        let r = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
        f * r
    }

    /// Coordinates of the h-gradient in `frame`.
    pub fn h_gradient(&self, h: &MorseFunction, p: &O::Point, frame: &DMatrix<f64>) -> DVector<f64> {
        frame.tr_mul(&h.differential(self.obj, p))
    }

    /// Intrinsic h-Hessian by central differences in a transported frame.
    pub fn h_hessian(&self, h: &MorseFunction, p: &O::Point, frame: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let d = frame.ncols();
        let mut hess = DMatrix::zeros(d, d);
        for k in 0..d {
            let dir = frame.column(k).into_owned();
            let plus = self.project(&self.obj.retract(p, &(&dir * FD_STEP)))?;
            let minus = self.project(&self.obj.retract(p, &(&dir * -FD_STEP)))?;
            let gp = self.h_gradient(h, &plus, &self.aligned_frame(&plus, frame));
            let gm = self.h_gradient(h, &minus, &self.aligned_frame(&minus, frame));
            hess.set_column(k, &((gp - gm) / (2.0 * FD_STEP)));
        }
        Some((&hess + hess.transpose()) * 0.5)
    }

    /// Newton iteration for a critical point of h on the manifold.
    pub fn newton(&self, h: &MorseFunction, start: &O::Point, max_iter: usize) -> Option<O::Point> {
        let mut p = start.clone();
        for _ in 0..max_iter {
            let f = self.frame(&p);
            let g = self.h_gradient(h, &p, &f);
            if g.norm() < H_GRAD_TOL {
                return Some(p);
            }
            let eig = SymmetricEigen::new(self.h_hessian(h, &p, &f)?);
            let mut step = DVector::zeros(f.ncols());
            for i in 0..f.ncols() {
                let v = eig.eigenvectors.column(i);
                let lam = eig.eigenvalues[i];
                let lam = if lam.abs() < 1e-8 { 1e-8_f64.copysign(lam) } else { lam };
                step -= v * (v.dot(&g) / lam);
            }
            let len = step.norm();
            if len > 0.25 {
                step *= 0.25 / len;
            }
            p = self.project(&self.obj.retract(&p, &(&f * step)))?;
        }
        let g = self.h_gradient(h, &p, &self.frame(&p));
        (g.norm() < H_GRAD_TOL).then_some(p)
    }

    /// Classifies an h-critical point: eigenvalues ascending and ambient directions.
    pub fn classify(&self, h: &MorseFunction, p: &O::Point) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let f = self.frame(p);
        if f.ncols() == 0 {
            return Some((vec![], f));
        }
        let eig = SymmetricEigen::new(self.h_hessian(h, p, &f)?);
        let mut order: Vec<usize> = (0..f.ncols()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let dirs = DMatrix::from_columns(&order.iter().map(|&i| &f * eig.eigenvectors.column(i)).collect::<Vec<_>>());
        Some((values, dirs))
    }

    /// Random points on the manifold reached by short kernel walks.
    pub fn sample_points(&self, reps: &[O::Point], fingerprint: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<O::Point> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = reps[i % reps.len()].clone();
            for _ in 0..(1 + i % 12) {
                let f = self.frame(&p);
                let c = DVector::from_fn(f.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let Some(q) = self.project(&self.obj.retract(&p, &(&f * (c.normalize() * 0.4)))) else { break };
                match self.obj.fingerprint(&q) {
                    Ok(fp) if fp.len() == fingerprint.len() && fp.iter().zip(fingerprint).all(|(a, b)| (a - b).abs() < 1e-4) => p = q,
                    _ => break,
                }
            }
            out.push(p);
        }
        out
    }
}

fn is_plausible(dim: usize, inds: &[usize]) -> bool {
    if dim == 0 {
        return inds.len() == 1;
    }
    let euler: i64 = inds.iter().map(|&i| if i % 2 == 0 { 1 } else { -1 }).sum();
    (dim.is_multiple_of(2) || euler == 0) && inds.contains(&0) && inds.contains(&dim)
}

/// Picks a random h and locates its critical points on `c`, resampling h
/// when a critical point is degenerate, the critical set is implausible, or
/// its Euler characteristic is not confirmed by a second draw.
pub fn choose_h<O: Objective + ?Sized>(obj: &O, c: &CriticalManifold<O::Point>, rng: &mut dyn RngCore) -> Result<AuxiliaryMorse<O::Point>, MorseBottError> {
    let view = ManifoldView::new(obj, c.kernel_dim);
    let n_obs = obj.observables(&c.representatives[0]).len();
    // Euler characteristics seen so far; a draw is kept once an independent
    // draw agrees with it, which guards against a missed critical point.
    let mut seen: Vec<i64> = Vec::new();
    for attempt in 1..=MAX_H_ATTEMPTS {
        let h = MorseFunction::random(n_obs, rng);
        let Some(points) = h_critical_points(&view, c, &h, rng) else { continue };
        let euler: i64 = points.iter().map(|p| if p.ind_h % 2 == 0 { 1 } else { -1 }).sum();
        if c.kernel_dim == 0 || seen.contains(&euler) {
            return Ok(AuxiliaryMorse { manifold: c.id, dim: c.kernel_dim, function: h, points, attempts: attempt });
        }
        seen.push(euler);
    }
    Err(MorseBottError::MorseFailure { manifold: c.id, attempts: MAX_H_ATTEMPTS })
}

/// Critical points of `h` on `c`, or `None` when `h` fails the Morse checks.
pub fn h_critical_points<O: Objective + ?Sized>(
    view: &ManifoldView<'_, O>,
    c: &CriticalManifold<O::Point>,
    h: &MorseFunction,
    rng: &mut dyn RngCore,
) -> Option<Vec<HCriticalPoint<O::Point>>> {
    let obj = view.obj;
    let d = view.dim;
    let candidates = if d == 0 {
        vec![c.representatives[0].clone()]
    } else {
        let starts = view.sample_points(&c.representatives, &c.fingerprint, 32 * (d + 1), rng);
        starts.iter().filter_map(|s| view.newton(h, s, 60)).collect()
    };
    let mut found: Vec<O::Point> = Vec::new();
    for p in candidates {
        if !found.iter().any(|q| obj.distance(q, &p) < DEDUPE_DISTANCE) {
            found.push(p);
        }
    }
    let mut points = Vec::new();
    for p in found {
        let (h_eigenvalues, h_directions) = view.classify(h, &p)?;
        if h_eigenvalues.iter().any(|l| l.abs() <= H_NONDEGENERACY) {
            return None;
        }
        points.push(HCriticalPoint {
            manifold: c.id,
            h_value: h.value(obj, &p),
            ind_ym: c.index,
            ind_h: h_eigenvalues.iter().filter(|&&l| l < 0.0).count(),
            h_eigenvalues,
            h_directions,
            point: p,
        });
    }
    let inds: Vec<usize> = points.iter().map(|p| p.ind_h).collect();
    if !is_plausible(d, &inds) {
        return None;
    }
    points.sort_by(|a, b| a.ind_h.cmp(&b.ind_h).then(a.h_value.total_cmp(&b.h_value)));
    Some(points)
}

/// Result of following the h-gradient on a manifold.
#[derive(Debug, Clone)]
pub struct HFlow<P> {
    pub path: Vec<P>,
    pub converged: bool,
}

impl<P> HFlow<P> {
    pub fn end(&self) -> &P {
        self.path.last().expect("path holds the start")
    }
}

impl<'a, O: Objective + ?Sized> ManifoldView<'a, O> {
    /// Projected descent of `sign * h` with adaptive steps, finished by
    /// Newton once the gradient is small.
    pub fn h_flow(&self, h: &MorseFunction, sign: f64, start: &O::Point, max_steps: usize) -> HFlow<O::Point> {
        self.h_flow_capped(h, sign, start, max_steps, 0.1, None)
    }

    /// [`h_flow`](Self::h_flow) with at most `max_move` displacement per step.
    /// Newton polishing never snaps onto `leaving`.
    pub fn h_flow_capped(&self, h: &MorseFunction, sign: f64, start: &O::Point, max_steps: usize, max_move: f64, leaving: Option<&O::Point>) -> HFlow<O::Point> {
        let mut path = vec![start.clone()];
        if self.dim == 0 {
            return HFlow { path, converged: true };
        }
        let mut p = start.clone();
        let mut dt = 0.2;
        let value = |q: &O::Point| sign * h.value(self.obj, q);
        let mut v = value(&p);
        for _ in 0..max_steps {
            let f = self.frame(&p);
            let g = self.h_gradient(h, &p, &f) * sign;
            let gn = g.norm();
            if gn < 1e-4 {
                if let Some(q) = self.newton(h, &p, 40) {
                    let back = leaving.is_some_and(|l| self.obj.distance(l, &q) < 1e-6);
                    if !back && self.obj.distance(&p, &q) < 1e-2 {
                        path.push(q);
                        return HFlow { path, converged: true };
                    }
                }
            }
            let mut step = -(&g) * dt;
            if step.norm() > max_move {
                step *= max_move / step.norm();
            }
            let Some(q) = self.project(&self.obj.retract(&p, &(&f * step))) else { break };
            let vq = value(&q);
            if vq <= v + 1e-14 {
                p = q;
                v = vq;
                path.push(p.clone());
                dt = (dt * 1.25).min(0.2);
            } else {
                dt *= 0.5;
                if dt < 1e-8 {
                    break;
                }
            }
        }
        HFlow { path, converged: false }
    }
}

/// Offset of `q` from `p` expressed against the metric, for side tests.
pub(crate) fn offset_along<O: Objective + ?Sized>(obj: &O, p: &O::Point, q: &O::Point, dir: &DVector<f64>) -> f64 {
    metric_dot(&obj.metric(), &obj.log_difference(p, q), dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchlib::{sphere_z2, torus_product_example};
    use crate::flow::Controller;
    use crate::group::Group;
    use crate::morse_bott::survey::{survey_critical, SurveyOptions};
    use crate::surface::OrientedCellComplex;
    use crate::ym::{EnergyBackend, Lattice, YangMills};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn h_indices<O: Objective>(obj: &O, seed: u64) -> Vec<(f64, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = survey_critical(obj, &SurveyOptions { n_starts: 24, ..Default::default() }, &Controller::default(), &mut rng);
        s.passing()
            .map(|c| {
                let aux = choose_h(obj, c, &mut rng).expect("Morse function found");
                for p in &aux.points {
                    let f = ManifoldView::new(obj, aux.dim).frame(&p.point);
                    assert!(ManifoldView::new(obj, aux.dim).h_gradient(&aux.function, &p.point, &f).norm() < H_GRAD_TOL);
                }
                (c.energy, aux.points.iter().map(|p| p.ind_h).collect())
            })
            .collect()
    }

    #[test]
    fn sphere_equator_has_two_h_points() {
        let r = h_indices(&sphere_z2(), 5);
        assert_eq!(r[0].1, vec![0, 1]);
        assert_eq!(r[1].1, vec![0]);
        assert_eq!(r[2].1, vec![0]);
    }

    #[test]
    fn u1_flat_torus_has_four_h_points() {
        let lattice = Lattice::new(OrientedCellComplex::torus_grid(2, 1).unwrap(), Group::U1).unwrap();
        let r = h_indices(&YangMills::new(lattice, EnergyBackend::Wilson), 6);
        assert_eq!(r.len(), 2);
        for (_, inds) in r {
            assert_eq!(inds, vec![0, 1, 1, 2]);
        }
    }

    #[test]
    fn torus_product_critical_circles() {
        let r = h_indices(&torus_product_example(), 7);
        assert!(r.iter().all(|(_, inds)| inds == &vec![0, 1]), "{r:?}");
    }

    #[test]
    fn flow_on_circle_reaches_minimum() {
        let obj = sphere_z2();
        let view = ManifoldView::new(&obj, 1);
        let h = MorseFunction { coefficients: vec![1.0, 0.3, 0.0] };
        let start = vec![0.0, 1.0, 0.0];
        let fl = view.h_flow(&h, 1.0, &start, 2000);
        assert!(fl.converged);
        let end = fl.end();
        let norm = (1.0f64 + 0.09).sqrt();
        assert!((end[0] + 1.0 / norm).abs() < 1e-8 && (end[1] + 0.3 / norm).abs() < 1e-8, "{end:?}");
    }
}

#[cfg(test)]
mod su2_tests {
    use super::*;
    use crate::flow::Controller;
    use crate::group::Group;
    use crate::morse_bott::survey::{survey_critical, SurveyOptions};
    use crate::surface::OrientedCellComplex;
    use crate::ym::{EnergyBackend, Lattice, YangMills};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn su2_top_level_h_points_realize_rp3() {
        let lattice = Lattice::new(OrientedCellComplex::minimal_genus(1).unwrap(), Group::Su2).unwrap();
        let obj = YangMills::new(lattice, EnergyBackend::Wilson);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = survey_critical(&obj, &SurveyOptions { n_starts: 24, ..Default::default() }, &Controller::default(), &mut rng);
        let top = s.passing().find(|m| (m.energy - 4.0).abs() < 1e-8).unwrap();
        let aux = choose_h(&obj, top, &mut rng).unwrap();
        let inds: Vec<usize> = aux.points.iter().map(|p| p.ind_h).collect();
        assert_eq!(inds, vec![0, 1, 2, 3]);
        assert!(aux.points.iter().all(|p| p.Ind() == 3 + p.ind_h));
    }
}
