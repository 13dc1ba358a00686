//! Analytic Morse-Bott benchmarks behind the [`Objective`] interface.
//!
//! Each benchmark is a function on an ambient Euclidean space restricted to
//! a constraint manifold (unit sphere, flat torus, or the whole space). The
//! callbacks are Euclidean; projection, curvature corrections and
//! retractions are handled by the constraint.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::objective::{gradient_audit, metric_norm, Objective, ObjectiveError};
use crate::perturbation::{cutoff, cutoff_prime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// Unit sphere in the ambient space.
    UnitSphere,
    /// Product of circles; coordinates are angles.
    TorusProduct,
    None,
}

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Smooth function on a constraint manifold with Euclidean callbacks.
#[derive(Clone)]
pub struct EmbeddedObjective {
    pub name: String,
    pub ambient_dim: usize,
    pub constraint: Constraint,
    pub value: ValueFn,
    pub gradient: VectorFn,
    pub hessian: MatrixFn,
    /// Invariants distinguishing critical components (energy is prepended).
    pub invariants: VectorFn,
    pub base_point: Vec<f64>,
    /// Known Z/2 Betti numbers.
    pub reference_betti: Option<Vec<usize>>,
}

impl std::fmt::Debug for EmbeddedObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddedObjective")
            .field("name", &self.name)
            .field("ambient_dim", &self.ambient_dim)
            .field("constraint", &self.constraint)
            .finish_non_exhaustive()
    }
}

fn wrap(t: f64) -> f64 {
    let w = (t + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// `f(x, y, z) = z^2` on the unit sphere.
pub fn sphere_z2() -> EmbeddedObjective {
    EmbeddedObjective {
        name: "sphere-z2".into(),
        ambient_dim: 3,
        constraint: Constraint::UnitSphere,
        value: Arc::new(|x| x[2] * x[2]),
        gradient: Arc::new(|x| vec![0.0, 0.0, 2.0 * x[2]]),
        hessian: Arc::new(|_| DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 2.0]))),
        invariants: Arc::new(|x| vec![x[2]]),
        base_point: vec![0.0, 0.0, 1.0],
        reference_betti: Some(vec![1, 0, 1]),
    }
}

/// `f(theta, phi) = 1 - cos(theta)` on the flat torus.
pub fn torus_product_example() -> EmbeddedObjective {
    EmbeddedObjective {
        name: "torus-cos".into(),
        ambient_dim: 2,
        constraint: Constraint::TorusProduct,
        value: Arc::new(|x| 1.0 - x[0].cos()),
        gradient: Arc::new(|x| vec![x[0].sin(), 0.0]),
        hessian: Arc::new(|x| DMatrix::from_diagonal(&DVector::from_vec(vec![x[0].cos(), 0.0]))),
        invariants: Arc::new(|x| vec![x[0].cos()]),
        base_point: vec![0.0, 0.0],
        reference_betti: Some(vec![1, 2, 1]),
    }
}

/// Checks the callbacks against central differences and, on success,
/// returns the objective ready for the flow and cascade engine.
pub fn register(obj: EmbeddedObjective, rng: &mut dyn RngCore) -> Result<EmbeddedObjective, ObjectiveError> {
    let h = 1e-5;
    for _ in 0..10 {
        let p = obj.random_point(rng);
        let worst = gradient_audit(&obj, &p, rng, 6, h)?;
        if worst > 1e-6 {
            return Err(ObjectiveError::InconsistentDerivatives(format!("{}: gradient mismatch {worst:.3e}", obj.name)));
        }
        let n = obj.ambient_dim;
        let hess = (obj.hessian)(&p);
        for j in 0..n {
            let mut xp = p.clone();
            let mut xm = p.clone();
            xp[j] += h;
            xm[j] -= h;
            let (gp, gm) = ((obj.gradient)(&xp), (obj.gradient)(&xm));
            for i in 0..n {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                if (fd - hess[(i, j)]).abs() > 1e-5 * hess[(i, j)].abs().max(1.0) {
                    return Err(ObjectiveError::InconsistentDerivatives(format!("{}: Hessian mismatch at ({i},{j})", obj.name)));
                }
            }
        }
    }
    Ok(obj)
}

/// Ambient bump `lambda * rho_k(|x - c|^2) <x - c, eta>`, the benchmark
/// counterpart of a model perturbation. On the torus `x - c` is wrapped.
#[derive(Debug, Clone, PartialEq)]
pub struct Bump {
    pub center: Vec<f64>,
    pub eta: Vec<f64>,
    pub k: u32,
    pub lambda: f64,
}

impl Bump {
    fn offset(&self, constraint: Constraint, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| if constraint == Constraint::TorusProduct { wrap(a - c) } else { a - c })
            .collect()
    }

    pub fn value(&self, constraint: Constraint, x: &[f64]) -> f64 {
        let d = self.offset(constraint, x);
        self.lambda * cutoff(dot(&d, &d), self.k) * dot(&d, &self.eta)
    }

    /// Euclidean gradient.
    pub fn gradient(&self, constraint: Constraint, x: &[f64]) -> Vec<f64> {
        let d = self.offset(constraint, x);
        let r = dot(&d, &d);
        let (rho, drho, pair) = (cutoff(r, self.k), cutoff_prime(r, self.k), dot(&d, &self.eta));
        d.iter().zip(&self.eta).map(|(di, ei)| self.lambda * (2.0 * drho * pair * di + rho * ei)).collect()
    }
}

impl EmbeddedObjective {
    /// The same benchmark with bump perturbations added. The Hessian of the
    /// bumps is taken by central differences of their gradient.
    pub fn with_bumps(&self, bumps: &[Bump]) -> EmbeddedObjective {
        let mut out = self.clone();
        if bumps.is_empty() {
            return out;
        }
        let c = self.constraint;
        let bumps: Arc<Vec<Bump>> = Arc::new(bumps.to_vec());
        let (v0, g0, h0) = (self.value.clone(), self.gradient.clone(), self.hessian.clone());
        let b = bumps.clone();
        out.value = Arc::new(move |x| v0(x) + b.iter().map(|t| t.value(c, x)).sum::<f64>());
        let b = bumps.clone();
        let bump_grad = move |x: &[f64]| {
            let mut g = vec![0.0; x.len()];
            for t in b.iter() {
                g.iter_mut().zip(t.gradient(c, x)).for_each(|(a, v)| *a += v);
            }
            g
        };
        let bg = bump_grad.clone();
        out.gradient = Arc::new(move |x| g0(x).iter().zip(bg(x)).map(|(a, b)| a + b).collect());
        out.hessian = Arc::new(move |x| {
            let n = x.len();
            let step = 1e-5;
            let mut h = h0(x);
            for j in 0..n {
                let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
                xp[j] += step;
                xm[j] -= step;
                let (gp, gm) = (bump_grad(&xp), bump_grad(&xm));
                for i in 0..n {
                    h[(i, j)] += (gp[i] - gm[i]) / (2.0 * step);
                }
            }
            (&h + h.transpose()) * 0.5
        });
        out.name = format!("{}+{}bumps", self.name, bumps.len());
        out
    }

    /// Smallest gradient norm of the unperturbed objective over random
    /// samples of the geodesic ball of radius `r` about `c`.
    fn gradient_floor(&self, c: &[f64], r: f64, samples: usize, rng: &mut dyn RngCore) -> f64 {
        let metric = self.metric();
        let cp = c.to_vec();
        let mut floor = f64::INFINITY;
        for _ in 0..samples {
            let basis = self.tangent_basis(&cp);
            let dir = DVector::from_fn(basis.ncols(), |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
            let len = r * Uniform::new(0.0, 1.0).expect("valid range").sample(rng);
            let x = self.retract(&cp, &(basis * dir.normalize() * len));
            let g = self.project(&x, &DVector::from_vec((self.gradient)(&x)));
            floor = floor.min(metric_norm(&metric, &g));
        }
        floor
    }
}

/// Draws `n` bumps whose supports stay where the unperturbed gradient is
/// bounded below, with amplitudes small enough that the perturbed gradient
/// cannot vanish there. Critical sets are therefore unchanged.
pub fn random_bumps(obj: &EmbeddedObjective, n: usize, k: u32, rng: &mut dyn RngCore) -> Vec<Bump> {
    let radius = 2.2 / k as f64;
    let mut out = Vec::new();
    for _ in 0..200 * n.max(1) {
        if out.len() == n {
            break;
        }
        let center = obj.random_point(rng);
        let floor = obj.gradient_floor(&center, radius, 200, rng);
        if floor < 0.05 {
            continue;
        }
        let mut eta: Vec<f64> = (0..obj.ambient_dim).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
        normalize(&mut eta);
        let unit = Bump { center: center.clone(), eta: eta.clone(), k, lambda: 1.0 };
        let mut sup: f64 = 0.0;
        for _ in 0..400 {
            let x = obj.random_point(rng);
            sup = sup.max(dot(&unit.gradient(obj.constraint, &x), &unit.gradient(obj.constraint, &x)).sqrt());
        }
        for _ in 0..400 {
            let basis = obj.tangent_basis(&center);
            let dir = DVector::from_fn(basis.ncols(), |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
            let x = obj.retract(&center, &(basis * dir.normalize() * (radius * 0.9)));
            sup = sup.max(dot(&unit.gradient(obj.constraint, &x), &unit.gradient(obj.constraint, &x)).sqrt());
        }
        out.push(Bump { center, eta, k, lambda: 0.25 * floor / sup.max(1e-12) });
    }
    out
}

impl EmbeddedObjective {
    fn project(&self, p: &[f64], v: &DVector<f64>) -> DVector<f64> {
        match self.constraint {
            Constraint::UnitSphere => {
                let pv = DVector::from_column_slice(p);
                v - &pv * pv.dot(v)
            }
            _ => v.clone(),
        }
    }

    pub fn euclidean_gradient(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_vec((self.gradient)(p))
    }
}

impl Objective for EmbeddedObjective {
    type Point = Vec<f64>;

    fn name(&self) -> String {
        self.name.clone()
    }

    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    fn manifold_dim(&self) -> usize {
        match self.constraint {
            Constraint::UnitSphere => self.ambient_dim - 1,
            _ => self.ambient_dim,
        }
    }

    fn metric(&self) -> DVector<f64> {
        DVector::from_element(self.ambient_dim, 1.0)
    }

    fn value(&self, p: &Vec<f64>) -> Result<f64, ObjectiveError> {
        Ok((self.value)(p))
    }

    fn gradient(&self, p: &Vec<f64>) -> Result<DVector<f64>, ObjectiveError> {
        Ok(self.project(p, &self.euclidean_gradient(p)))
    }

    fn tangent_basis(&self, p: &Vec<f64>) -> DMatrix<f64> {
        let n = self.ambient_dim;
        match self.constraint {
            Constraint::UnitSphere => {
                let pv = DVector::from_column_slice(p);
                let mut cols: Vec<DVector<f64>> = Vec::new();
                for k in 0..n {
                    let mut v = DVector::zeros(n);
                    v[k] = 1.0;
                    v -= &pv * pv[k];
                    for c in &cols {
                        let d = c.dot(&v);
                        v -= c * d;
                    }
                    let norm = v.norm();
                    if norm > 1e-6 && cols.len() < n - 1 {
                        cols.push(v / norm);
                    }
                }
                DMatrix::from_columns(&cols)
            }
            _ => DMatrix::identity(n, n),
        }
    }

    fn hessian(&self, p: &Vec<f64>) -> Result<DMatrix<f64>, ObjectiveError> {
        let b = self.tangent_basis(p);
        let mut h = (self.hessian)(p);
        if self.constraint == Constraint::UnitSphere {
            let radial = dot(p, &(self.gradient)(p));
            h -= DMatrix::identity(self.ambient_dim, self.ambient_dim) * radial;
        }
        Ok(b.transpose() * h * b)
    }

    fn retract(&self, p: &Vec<f64>, v: &DVector<f64>) -> Vec<f64> {
        match self.constraint {
            Constraint::UnitSphere => {
                let t = self.project(p, v);
                let a = t.norm();
                if a == 0.0 {
                    return p.clone();
                }
                let mut q: Vec<f64> = p.iter().zip(t.iter()).map(|(x, d)| a.cos() * x + a.sin() * d / a).collect();
                normalize(&mut q);
                q
            }
            Constraint::TorusProduct => p.iter().zip(v.iter()).map(|(x, d)| wrap(x + d)).collect(),
            Constraint::None => p.iter().zip(v.iter()).map(|(x, d)| x + d).collect(),
        }
    }

    fn log_difference(&self, p: &Vec<f64>, q: &Vec<f64>) -> DVector<f64> {
        match self.constraint {
            Constraint::UnitSphere => {
                let pv = DVector::from_column_slice(p);
                let qv = DVector::from_column_slice(q);
                let c = pv.dot(&qv).clamp(-1.0, 1.0);
                let t = &qv - &pv * c;
                let n = t.norm();
                if n < 1e-15 {
                    DVector::zeros(self.ambient_dim)
                } else {
                    t * (n.atan2(c) / n)
                }
            }
            Constraint::TorusProduct => DVector::from_iterator(self.ambient_dim, p.iter().zip(q).map(|(a, b)| wrap(b - a))),
            Constraint::None => DVector::from_iterator(self.ambient_dim, p.iter().zip(q).map(|(a, b)| b - a)),
        }
    }

    fn distance(&self, p: &Vec<f64>, q: &Vec<f64>) -> f64 {
        self.log_difference(p, q).norm()
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        match self.constraint {
            Constraint::UnitSphere => {
                let mut v: Vec<f64> = (0..self.ambient_dim).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
                normalize(&mut v);
                v
            }
            Constraint::TorusProduct => {
                let u = Uniform::new(-PI, PI).expect("valid range");
                (0..self.ambient_dim).map(|_| u.sample(rng)).collect()
            }
            Constraint::None => (0..self.ambient_dim).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect(),
        }
    }

    fn base_point(&self) -> Vec<f64> {
        self.base_point.clone()
    }

    fn fingerprint(&self, p: &Vec<f64>) -> Result<Vec<f64>, ObjectiveError> {
        let mut fp = vec![(self.value)(p)];
        fp.extend((self.invariants)(p));
        Ok(fp)
    }

    fn observables(&self, p: &Vec<f64>) -> DVector<f64> {
        match self.constraint {
            Constraint::TorusProduct => DVector::from_iterator(2 * p.len(), p.iter().flat_map(|t| [t.cos(), t.sin()])),
            _ => DVector::from_column_slice(p),
        }
    }

    fn observable_jacobian(&self, p: &Vec<f64>) -> DMatrix<f64> {
        let n = self.ambient_dim;
        match self.constraint {
            Constraint::TorusProduct => {
                let mut j = DMatrix::zeros(2 * n, n);
                for (i, t) in p.iter().enumerate() {
                    j[(2 * i, i)] = -t.sin();
                    j[(2 * i + 1, i)] = t.cos();
                }
                j
            }
            _ => DMatrix::identity(n, n),
        }
    }

    fn constraint_error(&self, p: &Vec<f64>) -> f64 {
        match self.constraint {
            Constraint::UnitSphere => (dot(p, p).sqrt() - 1.0).abs(),
            _ => 0.0,
        }
    }
}


#[cfg(test)]
mod bump_tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bumped_benchmarks_pass_the_audit_and_keep_critical_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for base in [sphere_z2(), torus_product_example()] {
            let bumps = random_bumps(&base, 2, 8, &mut rng);
            assert_eq!(bumps.len(), 2);
            let obj = register(base.with_bumps(&bumps), &mut rng).expect("bumped objective is consistent");
            let p = obj.base_point();
            assert!(obj.gradient(&p).unwrap().norm() < 1e-14);
            assert_eq!(obj.value(&p).unwrap(), base.value(&p).unwrap());
        }
    }
}
