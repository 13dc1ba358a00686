//! Smooth objectives on finite-dimensional Riemannian manifolds.
//!
//! The flow integrator and the cascade engine only see this trait. Tangent
//! vectors are expressed in fixed "ambient" coordinates of length
//! [`Objective::ambient_dim`] with a diagonal metric; for Lie-group
//! configuration spaces these are left-trivialized algebra coordinates, for
//! embedded benchmarks they are Euclidean vectors tangent to the constraint.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::RngCore;
use thiserror::Error;

use crate::group::CutLocus;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    CutLocus(#[from] CutLocus),
    #[error("inconsistent derivatives: {0}")]
    InconsistentDerivatives(String),
}

pub trait Objective: Sync {
    type Point: Clone + Send + Sync + std::fmt::Debug + serde::Serialize;

    fn name(&self) -> String;

    fn ambient_dim(&self) -> usize;

    /// Intrinsic dimension of the configuration manifold.
    fn manifold_dim(&self) -> usize;

    /// Diagonal of the metric in ambient coordinates.
    fn metric(&self) -> DVector<f64>;

    fn value(&self, p: &Self::Point) -> Result<f64, ObjectiveError>;

    /// Metric gradient in ambient coordinates (tangent at `p`).
    fn gradient(&self, p: &Self::Point) -> Result<DVector<f64>, ObjectiveError>;

    /// Metric-orthonormal tangent basis, `ambient_dim x manifold_dim`.
    fn tangent_basis(&self, p: &Self::Point) -> DMatrix<f64>;

    /// Riemannian Hessian in the basis of [`Objective::tangent_basis`].
    fn hessian(&self, p: &Self::Point) -> Result<DMatrix<f64>, ObjectiveError>;

    fn retract(&self, p: &Self::Point, v: &DVector<f64>) -> Self::Point;

    /// Tangent vector at `p` whose retraction reaches (approximately) `q`.
    fn log_difference(&self, p: &Self::Point, q: &Self::Point) -> DVector<f64>;

    fn distance(&self, p: &Self::Point, q: &Self::Point) -> f64;

    fn random_point(&self, rng: &mut dyn RngCore) -> Self::Point;

    /// Deterministic reference configuration (cold start).
    fn base_point(&self) -> Self::Point;

    /// Symmetry-invariant numbers; constant on a connected critical manifold.
    fn fingerprint(&self, p: &Self::Point) -> Result<Vec<f64>, ObjectiveError>;

    /// Ambient observables; auxiliary Morse functions are linear in these.
    fn observables(&self, p: &Self::Point) -> DVector<f64>;

    /// Derivative of [`Objective::observables`] along ambient tangent coordinates.
    fn observable_jacobian(&self, p: &Self::Point) -> DMatrix<f64>;

    /// Dimension of the symmetry orbit through `p` (directions along which the
    /// objective is constant for structural reasons).
    fn orbit_dimension(&self, _p: &Self::Point) -> usize {
        0
    }

    fn stabilizer_dimension(&self, _p: &Self::Point) -> usize {
        0
    }

    /// Largest jump of a local curvature-like quantity between two nearby
    /// points; integrators halve the step when this exceeds pi/4.
    fn step_jump(&self, _p: &Self::Point, _q: &Self::Point) -> f64 {
        0.0
    }

    /// Distance from the constraint set (unit modulus, unit sphere, ...).
    fn constraint_error(&self, _p: &Self::Point) -> f64 {
        0.0
    }
}

pub fn metric_dot(metric: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    metric.iter().zip(u.iter().zip(v.iter())).map(|(g, (a, b))| g * a * b).sum()
}

pub fn metric_norm(metric: &DVector<f64>, u: &DVector<f64>) -> f64 {
    metric_dot(metric, u, u).sqrt()
}

/// Coefficients of an ambient tangent vector in the orthonormal basis.
pub fn basis_coefficients(metric: &DVector<f64>, basis: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let gv = v.component_mul(metric);
    basis.transpose() * gv
}

/// Hessian eigen-decomposition with eigenvalues ascending and eigenvectors
/// mapped to ambient coordinates.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    /// Ambient eigenvectors, one per column.
    pub vectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Kernel threshold `tol * max(1, spectral radius)`.
    pub fn threshold(&self, tol: f64) -> f64 {
        tol * self.spectral_radius().max(1.0)
    }

    pub fn kernel_indices(&self, tol: f64) -> Vec<usize> {
        let thr = self.threshold(tol);
        (0..self.values.len()).filter(|&i| self.values[i].abs() <= thr).collect()
    }

    pub fn negative_indices(&self, tol: f64) -> Vec<usize> {
        let thr = self.threshold(tol);
        (0..self.values.len()).filter(|&i| self.values[i] < -thr).collect()
    }

    pub fn positive_indices(&self, tol: f64) -> Vec<usize> {
        let thr = self.threshold(tol);
        (0..self.values.len()).filter(|&i| self.values[i] > thr).collect()
    }

    pub fn columns(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_columns(&idx.iter().map(|&i| self.vectors.column(i).into_owned()).collect::<Vec<_>>())
    }
}

pub fn spectrum<O: Objective + ?Sized>(obj: &O, p: &O::Point) -> Result<Spectrum, ObjectiveError> {
    let h = obj.hessian(p)?;
    let basis = obj.tangent_basis(p);
    Ok(sorted_eigen(&h, &basis))
}

pub fn sorted_eigen(h: &DMatrix<f64>, basis: &DMatrix<f64>) -> Spectrum {
    let n = h.nrows();
    if n == 0 {
        return Spectrum { values: vec![], vectors: DMatrix::zeros(basis.nrows(), 0) };
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order.iter().map(|&i| basis * eig.eigenvectors.column(i)).collect::<Vec<_>>(),
    );
    Spectrum { values, vectors }
}

/// Finite-difference audit of value/gradient consistency along random
/// tangent directions. Returns the worst relative error.
pub fn gradient_audit<O: Objective + ?Sized>(
    obj: &O,
    p: &O::Point,
    rng: &mut dyn RngCore,
    directions: usize,
    step: f64,
) -> Result<f64, ObjectiveError> {
    use rand_distr::{Distribution, StandardNormal};
    let g = obj.gradient(p)?;
    let metric = obj.metric();
    let basis = obj.tangent_basis(p);
    let mut worst = 0.0_f64;
    for _ in 0..directions {
        let c = DVector::from_fn(basis.ncols(), |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
        let v = &basis * c;
        let fp = obj.value(&obj.retract(p, &(&v * step)))?;
        let fm = obj.value(&obj.retract(p, &(&v * -step)))?;
        let fd = (fp - fm) / (2.0 * step);
        let an = metric_dot(&metric, &g, &v);
        let scale = an.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((fd - an).abs() / scale);
    }
    Ok(worst)
}
