//! Critical-set survey: flows and saddle searches from random starts,
//! refinement, fingerprint clustering and Morse-Bott diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::{integrate, refine_unchecked, Controller, KERNEL_TOL, REFINE_MAX_ITER, REFINE_TOL};
use crate::objective::{basis_coefficients, metric_norm, sorted_eigen, spectrum, Objective, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurveyOptions {
    pub n_starts: usize,
    pub cluster_tol: f64,
    pub kernel_tol: f64,
    /// Size of the random offsets used by the PCA dimension estimate.
    pub pca_offset: f64,
    /// Extra representatives gathered by a random walk along the kernel.
    pub walk_steps: usize,
    pub walk_step: f64,
    /// Also run a Levenberg-Marquardt search for zeros of the gradient,
    /// which reaches saddles that gradient flow avoids.
    pub saddle_search: bool,
    pub max_representatives: usize,
}

impl Default for SurveyOptions {
    fn default() -> Self {
        Self {
            n_starts: 40,
            cluster_tol: 1e-4,
            kernel_tol: KERNEL_TOL,
            pca_offset: 1e-3,
            walk_steps: 6,
            walk_step: 0.3,
            saddle_search: true,
            max_representatives: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorseBottReport {
    pub passed: bool,
    pub kernel_dims: Vec<usize>,
    pub stabilizer_dims: Vec<usize>,
    pub pca_dim: usize,
    pub orbit_dim: usize,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalManifold<P> {
    pub id: usize,
    pub energy: f64,
    pub fingerprint: Vec<f64>,
    pub representatives: Vec<P>,
    /// Local-sampling (PCA) dimension estimate.
    pub dimension: usize,
    pub kernel_dim: usize,
    pub index: usize,
    /// Hessian eigenvalues off the kernel at the first representative.
    pub normal_spectrum: Vec<f64>,
    pub orbit_dim: usize,
    pub stabilizer_dim: usize,
    pub morse_bott: MorseBottReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Survey<P> {
    pub manifolds: Vec<CriticalManifold<P>>,
    /// Search endpoints that did not refine to a critical point.
    pub outliers: Vec<P>,
    pub starts: usize,
}

impl<P> Survey<P> {
    pub fn passing(&self) -> impl Iterator<Item = &CriticalManifold<P>> {
        self.manifolds.iter().filter(|m| m.morse_bott.passed)
    }
}

fn standard_normal_vec(rng: &mut dyn RngCore, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Metric-unit random tangent vector at `p`.
pub(crate) fn random_tangent<O: Objective + ?Sized>(obj: &O, p: &O::Point, rng: &mut dyn RngCore) -> DVector<f64> {
    let b = obj.tangent_basis(p);
    let c = standard_normal_vec(rng, b.ncols());
    let n = c.norm().max(1e-300);
    b * (c / n)
}

/// Levenberg-Marquardt on `grad f = 0`; returns a point with small gradient.
pub fn gradient_zero_search<O: Objective + ?Sized>(obj: &O, start: &O::Point, max_iter: usize) -> Option<O::Point> {
    let metric = obj.metric();
    let mut p = start.clone();
    let mut g = obj.gradient(&p).ok()?;
    let mut gn = metric_norm(&metric, &g);
    let mut mu = 1e-2;
    for _ in 0..max_iter {
        if gn < 1e-6 {
            return Some(p);
        }
        let b = obj.tangent_basis(&p);
        let h = obj.hessian(&p).ok()?;
        let gb = basis_coefficients(&metric, &b, &g);
        loop {
            let a = &h * &h + DMatrix::identity(h.nrows(), h.ncols()) * mu;
            let rhs = &h * &gb;
            let step = {
                let ch = a.clone().cholesky()?;
                -ch.solve(&rhs)
            };
            let q = obj.retract(&p, &(&b * step));
            let gq = obj.gradient(&q).ok()?;
            let nq = metric_norm(&metric, &gq);
            if nq < gn {
                p = q;
                g = gq;
                gn = nq;
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu *= 4.0;
            if mu > 1e8 {
                return None;
            }
        }
    }
    (gn < 1e-6).then_some(p)
}

fn candidates_from<O: Objective + ?Sized>(obj: &O, start: &O::Point, ctl: &Controller, saddle: bool) -> (Vec<O::Point>, Vec<O::Point>) {
    let metric = obj.metric();
    let mut found = Vec::new();
    let mut lost = Vec::new();
    let mut polish = |p: O::Point| {
        let gn = obj.gradient(&p).map(|g| metric_norm(&metric, &g)).unwrap_or(f64::INFINITY);
        if gn >= 1e-3 {
            lost.push(p);
            return;
        }
        match refine_unchecked(obj, &p, REFINE_TOL, REFINE_MAX_ITER) {
            Ok(r) => found.push(r),
            Err(_) => lost.push(p),
        }
    };
    if let Ok(t) = integrate(obj, start, ctl) {
        polish(t.last().clone());
    }
    if saddle {
        if let Some(p) = gradient_zero_search(obj, start, 300) {
            polish(p);
        }
    }
    (found, lost)
}

fn fingerprint_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Dimension of the critical set through `x` from the spread of nearby
/// critical points (random offsets refined back onto the critical set).
pub fn pca_dimension<O: Objective + ?Sized>(obj: &O, x: &O::Point, offset: f64, rng: &mut dyn RngCore) -> usize {
    let n = obj.manifold_dim();
    let samples = 2 * n + 6;
    let metric = obj.metric();
    let sq = metric.map(f64::sqrt);
    let mut cols = Vec::new();
    for _ in 0..samples {
        let v = random_tangent(obj, x, rng) * offset;
        if let Ok(y) = refine_unchecked(obj, &obj.retract(x, &v), REFINE_TOL, REFINE_MAX_ITER) {
            cols.push(obj.log_difference(x, &y).component_mul(&sq));
        }
    }
    if cols.is_empty() {
        return 0;
    }
    let m = DMatrix::from_columns(&cols);
    let sv = m.svd(false, false).singular_values;
    let smax = sv.max();
    // tangential spread ~ offset, normal residue ~ offset^2
    if smax < offset * 1e-2 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-2 * smax).count()
}

pub(crate) fn kernel_dim(spec: &Spectrum, tol: f64) -> usize {
    spec.kernel_indices(tol).len()
}

/// Flow and saddle-search from the base point plus `n_starts` random
/// starts, then refine, cluster and analyse each critical component.
pub fn survey_critical<O: Objective + ?Sized>(obj: &O, opts: &SurveyOptions, ctl: &Controller, rng: &mut dyn RngCore) -> Survey<O::Point> {
    if opts.n_starts == 0 {
        return Survey { manifolds: Vec::new(), outliers: Vec::new(), starts: 0 };
    }
    let mut starts = vec![obj.base_point()];
    for _ in 0..opts.n_starts {
        starts.push(obj.random_point(rng));
    }
    let results: Vec<(Vec<O::Point>, Vec<O::Point>)> =
        starts.par_iter().map(|s| candidates_from(obj, s, ctl, opts.saddle_search)).collect();

    let mut clusters: Vec<(Vec<f64>, Vec<O::Point>)> = Vec::new();
    let mut outliers = Vec::new();
    for (found, lost) in results {
        outliers.extend(lost);
        for p in found {
            let Ok(fp) = obj.fingerprint(&p) else { continue };
            match clusters.iter_mut().find(|(f, _)| fingerprint_distance(f, &fp) < opts.cluster_tol) {
                Some((_, reps)) => reps.push(p),
                None => clusters.push((fp, vec![p])),
            }
        }
    }
    clusters.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));

    let seeds: Vec<u64> = clusters.iter().map(|_| rng.random()).collect();
    let analysed: Vec<Vec<CriticalManifold<O::Point>>> = clusters
        .into_par_iter()
        .zip(seeds)
        .map(|((fp, reps), seed)| analyse_cluster(obj, fp, reps, opts, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect();
    let mut manifolds: Vec<CriticalManifold<O::Point>> = analysed.into_iter().flatten().collect();
    for (i, m) in manifolds.iter_mut().enumerate() {
        m.id = i;
    }
    Survey { manifolds, outliers, starts: starts.len() }
}

fn analyse_cluster<O: Objective + ?Sized>(
    obj: &O,
    fingerprint: Vec<f64>,
    mut reps: Vec<O::Point>,
    opts: &SurveyOptions,
    rng: &mut ChaCha8Rng,
) -> Vec<CriticalManifold<O::Point>> {
    reps.truncate(opts.max_representatives);
    let first = reps[0].clone();
    let pca = pca_dimension(obj, &first, opts.pca_offset, rng);
    if pca == 0 {
        // isolated points sharing a fingerprint are separate components
        let mut groups: Vec<Vec<O::Point>> = Vec::new();
        for p in reps {
            match groups.iter_mut().find(|g| obj.distance(&g[0], &p) < 1e-6) {
                Some(g) => g.push(p),
                None => groups.push(vec![p]),
            }
        }
        return groups.into_iter().map(|g| build_manifold(obj, fingerprint.clone(), g, 0, opts)).collect();
    }
    // random walk along the kernel for additional representatives
    let mut cur = first;
    for _ in 0..opts.walk_steps {
        let Ok(spec) = spectrum(obj, &cur) else { break };
        let ker = spec.kernel_indices(opts.kernel_tol);
        if ker.is_empty() {
            break;
        }
        let k = spec.columns(&ker);
        let c = standard_normal_vec(rng, ker.len());
        let v = k * (c.normalize() * opts.walk_step);
        let Ok(next) = refine_unchecked(obj, &obj.retract(&cur, &v), REFINE_TOL, REFINE_MAX_ITER) else { break };
        match obj.fingerprint(&next) {
            Ok(fp) if fingerprint_distance(&fp, &fingerprint) < opts.cluster_tol => {
                reps.push(next.clone());
                cur = next;
            }
            _ => break,
        }
    }
    vec![build_manifold(obj, fingerprint, reps, pca, opts)]
}

fn build_manifold<O: Objective + ?Sized>(
    obj: &O,
    fingerprint: Vec<f64>,
    reps: Vec<O::Point>,
    pca: usize,
    opts: &SurveyOptions,
) -> CriticalManifold<O::Point> {
    let mut kernel_dims = Vec::new();
    let mut stabilizer_dims = Vec::new();
    let mut first_spec = None;
    for p in &reps {
        let spec = match spectrum(obj, p) {
            Ok(s) => s,
            Err(_) => sorted_eigen(&DMatrix::zeros(0, 0), &DMatrix::zeros(0, 0)),
        };
        kernel_dims.push(kernel_dim(&spec, opts.kernel_tol));
        stabilizer_dims.push(obj.stabilizer_dimension(p));
        if first_spec.is_none() {
            first_spec = Some(spec);
        }
    }
    let spec = first_spec.expect("cluster is non-empty");
    let kernel = kernel_dims[0];
    let orbit_dim = obj.orbit_dimension(&reps[0]);
    let reason = if kernel_dims.iter().any(|&k| k != kernel) {
        Some(format!("kernel dimension varies across representatives: {kernel_dims:?}"))
    } else if stabilizer_dims.iter().any(|&s| s != stabilizer_dims[0]) {
        Some(format!("stabilizer dimension jumps across representatives: {stabilizer_dims:?}"))
    } else if kernel != pca {
        Some(format!("kernel dimension {kernel} differs from sampled dimension {pca}"))
    } else if kernel < orbit_dim {
        Some(format!("kernel dimension {kernel} is below the orbit dimension {orbit_dim}"))
    } else {
        None
    };
    let ker_idx = spec.kernel_indices(opts.kernel_tol);
    let normal_spectrum = (0..spec.values.len()).filter(|i| !ker_idx.contains(i)).map(|i| spec.values[i]).collect();
    CriticalManifold {
        id: 0,
        energy: fingerprint[0],
        index: spec.negative_indices(opts.kernel_tol).len(),
        fingerprint,
        dimension: pca,
        kernel_dim: kernel,
        normal_spectrum,
        orbit_dim,
        stabilizer_dim: stabilizer_dims[0],
        morse_bott: MorseBottReport { passed: reason.is_none(), kernel_dims, stabilizer_dims, pca_dim: pca, orbit_dim, reason },
        representatives: reps,
    }
}

/// Re-runs the Morse-Bott test on a surveyed component.
pub fn morse_bott_check<P>(c: &CriticalManifold<P>) -> MorseBottReport {
    c.morse_bott.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchlib::sphere_z2;
    use crate::group::Group;
    use crate::surface::OrientedCellComplex;
    use crate::ym::{EnergyBackend, Lattice, YangMills};

    fn opts(n: usize) -> SurveyOptions {
        SurveyOptions { n_starts: n, ..Default::default() }
    }

    #[test]
    fn zero_starts_give_empty_survey() {
        let obj = sphere_z2();
        let s = survey_critical(&obj, &opts(0), &Controller::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(s.manifolds.is_empty());
    }

    #[test]
    fn sphere_has_poles_and_equator() {
        let obj = sphere_z2();
        let s = survey_critical(&obj, &opts(20), &Controller::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let summary: Vec<(f64, usize, usize)> = s.manifolds.iter().map(|m| (m.energy, m.dimension, m.index)).collect();
        assert_eq!(s.manifolds.len(), 3, "{summary:?}");
        assert!(s.manifolds.iter().all(|m| m.morse_bott.passed));
        let eq = &s.manifolds[0];
        assert_eq!((eq.dimension, eq.index), (1, 0));
        assert!(eq.energy.abs() < 1e-12);
        for pole in &s.manifolds[1..] {
            assert_eq!((pole.dimension, pole.index), (0, 2));
            assert!((pole.energy - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn u1_grid_has_two_tori() {
        let lattice = Lattice::new(OrientedCellComplex::torus_grid(2, 1).unwrap(), Group::U1).unwrap();
        let obj = YangMills::new(lattice, EnergyBackend::Wilson);
        let s = survey_critical(&obj, &opts(30), &Controller::default(), &mut ChaCha8Rng::seed_from_u64(3));
        let summary: Vec<(f64, usize, usize)> = s.manifolds.iter().map(|m| (m.energy, m.dimension, m.index)).collect();
        assert_eq!(s.manifolds.len(), 2, "{summary:?}");
        assert!(s.manifolds[0].energy.abs() < 1e-10);
        assert!((s.manifolds[1].energy - 8.0).abs() < 1e-8);
        for m in &s.manifolds {
            assert_eq!(m.kernel_dim, 2);
            assert!(m.morse_bott.passed, "{:?}", m.morse_bott);
        }
        assert_eq!(s.manifolds[1].index, 1);
    }

    #[test]
    fn su2_genus_one_top_level_passes_minimum_fails() {
        let lattice = Lattice::new(OrientedCellComplex::minimal_genus(1).unwrap(), Group::Su2).unwrap();
        let obj = YangMills::new(lattice, EnergyBackend::Wilson);
        let s = survey_critical(&obj, &opts(24), &Controller::default(), &mut ChaCha8Rng::seed_from_u64(4));
        let top = s.manifolds.iter().find(|m| (m.energy - 4.0).abs() < 1e-8).expect("top level found");
        assert_eq!((top.kernel_dim, top.index, top.stabilizer_dim), (3, 3, 0));
        assert!(top.morse_bott.passed, "{:?}", top.morse_bott);
        let min = s.manifolds.iter().find(|m| m.energy.abs() < 1e-10).expect("minimum found");
        assert!(!min.morse_bott.passed);
    }
}
