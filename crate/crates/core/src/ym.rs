//! Discrete Yang-Mills functional.
//!
//! A connection assigns a group element to every oriented edge. The
//! curvature of a face is the logarithm of its holonomy (ordered product
//! along the boundary word, starting at the face base vertex). Two energy
//! backends are provided, both functions of `q0 = Re tr(hol) / 2` only:
//!
//! * Wilson: `sum_f (2 / w_f) (1 - q0)`
//! * LogNorm: `sum_f |log hol_f|^2 / (2 w_f) = sum_f acos(q0)^2 / (2 w_f)`
//!
//! Tangent vectors are right-translated: `U_e -> U_e exp(t X)`. All first and
//! second derivatives are assembled from the quaternion products below; finite
//! differences appear only in tests.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::group::{qmul, Algebra, CutLocus, Group, GroupElement, DEFAULT_CUT_MARGIN};
use crate::objective::{Objective, ObjectiveError};
use crate::perturbation::PerturbationBank;
use crate::surface::{ComplexError, OrientedCellComplex, SpanningTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnergyBackend {
    #[default]
    Wilson,
    LogNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub group: Group,
    pub edges: Vec<GroupElement>,
}

/// Per-vertex gauge transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeTransform {
    pub vertices: Vec<GroupElement>,
}

/// Algebra-valued edge field. Inactive edges are held at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentField {
    pub values: Vec<Algebra>,
    pub active: Vec<bool>,
}

/// Complex, gauge slice and structure group bundled together.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub complex: OrientedCellComplex,
    pub tree: SpanningTree,
    pub group: Group,
}

impl Connection {
    pub fn identity(group: Group, num_edges: usize) -> Self {
        Self { group, edges: vec![GroupElement::IDENTITY; num_edges] }
    }

    pub fn max_modulus_error(&self) -> f64 {
        self.edges.iter().fold(0.0, |m, u| m.max(u.modulus_error()))
    }

    /// Per-edge component arrays (`[q0, q1]` for U(1), `[q0..q3]` for SU(2)).
    pub fn components(&self) -> Vec<Vec<f64>> {
        let k = self.group.components();
        self.edges.iter().map(|u| u.0[..k].to_vec()).collect()
    }

    pub fn to_json(&self, complex: &OrientedCellComplex) -> String {
        serde_json::to_string_pretty(&ConnectionDocument {
            group: self.group,
            complex_hash: complex.content_hash(),
            edges: self.components(),
        })
        .expect("connection serializes")
    }

    pub fn from_json(s: &str, complex: &OrientedCellComplex) -> Result<Self, ComplexError> {
        let doc: ConnectionDocument = serde_json::from_str(s).map_err(|e| ComplexError::Malformed(e.to_string()))?;
        if doc.complex_hash != complex.content_hash() {
            return Err(ComplexError::Malformed("complex hash mismatch".into()));
        }
        if doc.edges.len() != complex.num_edges() {
            return Err(ComplexError::Malformed("edge count mismatch".into()));
        }
        let edges = doc
            .edges
            .iter()
            .map(|c| {
                let mut q = [0.0; 4];
                for (i, x) in c.iter().take(4).enumerate() {
                    q[i] = *x;
                }
                GroupElement(q).renormalized()
            })
            .collect();
        Ok(Self { group: doc.group, edges })
    }

    /// Short digest of the edge values, used to label points in reports.
    pub fn digest(&self) -> String {
        let mut h = sha2::Sha256::new();
        for u in &self.edges {
            for x in u.0 {
                // rounded so that numerically identical points hash equally
                h.update(((x * 1e8).round() as i64).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectionDocument {
    pub group: Group,
    pub complex_hash: String,
    pub edges: Vec<Vec<f64>>,
}

impl GaugeTransform {
    pub fn identity(num_vertices: usize) -> Self {
        Self { vertices: vec![GroupElement::IDENTITY; num_vertices] }
    }

    pub fn constant(num_vertices: usize, c: GroupElement) -> Self {
        Self { vertices: vec![c; num_vertices] }
    }

    pub fn is_based(&self, base: usize) -> bool {
        self.vertices[base].0.iter().zip(GroupElement::IDENTITY.0).all(|(a, b)| (a - b).abs() < 1e-12)
    }
}

impl TangentField {
    pub fn zeros(num_edges: usize, active: Vec<bool>) -> Self {
        Self { values: vec![Algebra::ZERO; num_edges], active }
    }

    pub fn norm_sq(&self, complex: &OrientedCellComplex) -> f64 {
        self.inner(&self.clone(), complex)
    }

    pub fn inner(&self, other: &TangentField, complex: &OrientedCellComplex) -> f64 {
        (0..self.values.len())
            .filter(|&e| self.active[e])
            .map(|e| complex.edge_weights[e] * self.values[e].dot(&other.values[e]))
            .sum()
    }

    pub fn add_scaled(&mut self, other: &TangentField, s: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = a.add(&b.scale(s));
        }
    }
}

impl Lattice {
    pub fn new(complex: OrientedCellComplex, group: Group) -> Result<Self, ComplexError> {
        let tree = complex.spanning_tree(complex.base_vertex)?;
        Ok(Self { complex, tree, group })
    }

    pub fn free_edges(&self) -> &[usize] {
        &self.tree.free_edges
    }

    pub fn tangent_dim(&self) -> usize {
        self.tree.free_edges.len() * self.group.dim()
    }

    pub fn free_mask(&self) -> Vec<bool> {
        (0..self.complex.num_edges()).map(|e| !self.tree.contains(e)).collect()
    }

    pub fn zero_field(&self) -> TangentField {
        TangentField::zeros(self.complex.num_edges(), self.free_mask())
    }

    /// Flattens a field on the free edges to ambient coordinates.
    pub fn flatten(&self, field: &TangentField) -> DVector<f64> {
        let d = self.group.dim();
        let mut v = DVector::zeros(self.tangent_dim());
        for (i, &e) in self.free_edges().iter().enumerate() {
            for k in 0..d {
                v[i * d + k] = field.values[e].0[k];
            }
        }
        v
    }

    pub fn unflatten(&self, v: &DVector<f64>) -> TangentField {
        let d = self.group.dim();
        let mut f = self.zero_field();
        for (i, &e) in self.free_edges().iter().enumerate() {
            f.values[e] = self.group.from_coefficients(&v.as_slice()[i * d..(i + 1) * d]);
        }
        f
    }

    /// Metric weight for every ambient coordinate.
    pub fn coordinate_weights(&self) -> DVector<f64> {
        let d = self.group.dim();
        DVector::from_fn(self.tangent_dim(), |i, _| self.complex.edge_weights[self.free_edges()[i / d]])
    }

    /// `U_e -> U_e exp(v_e)` on free edges.
    pub fn retract(&self, conn: &Connection, field: &TangentField) -> Connection {
        let mut out = conn.clone();
        for &e in self.free_edges() {
            out.edges[e] = conn.edges[e].right_exp(&self.group.project(&field.values[e]));
        }
        out
    }

    /// Haar-random values on free edges, identity on the tree.
    pub fn random_connection(&self, rng: &mut dyn RngCore) -> Connection {
        let mut c = Connection::identity(self.group, self.complex.num_edges());
        for &e in self.free_edges() {
            c.edges[e] = self.group.haar(rng);
        }
        c
    }
}

pub fn holonomy(complex: &OrientedCellComplex, conn: &Connection, face: usize) -> GroupElement {
    complex.faces[face].word.iter().fold(GroupElement::IDENTITY, |acc, u| {
        let g = conn.edges[u.edge];
        acc.mul(&if u.forward { g } else { g.inverse() })
    })
}

pub fn curvature(complex: &OrientedCellComplex, conn: &Connection, face: usize, margin: f64) -> Result<Algebra, CutLocus> {
    holonomy(complex, conn, face).log(conn.group, margin)
}

/// Face energy as a function of `x = q0(hol)`, with first and second derivatives.
fn face_profile(backend: EnergyBackend, hol: &GroupElement, group: Group, w: f64, margin: f64) -> Result<(f64, f64, f64), CutLocus> {
    match backend {
        EnergyBackend::Wilson => Ok((2.0 / w * (1.0 - hol.0[0]), -2.0 / w, 0.0)),
        EnergyBackend::LogNorm => {
            hol.log(group, margin)?;
            let theta = hol.angle();
            let (s, c) = theta.sin_cos();
            let (d1, d2) = if theta < 1e-3 {
                let t2 = theta * theta;
                (-(1.0 + t2 / 6.0), 1.0 / 3.0 + 2.0 * t2 / 15.0)
            } else {
                (-theta / s, (s - theta * c) / (s * s * s))
            };
            Ok((theta * theta / (2.0 * w), d1 / w, d2 / w))
        }
    }
}

/// Unperturbed discrete Yang-Mills energy.
pub fn ym_energy(complex: &OrientedCellComplex, conn: &Connection, backend: EnergyBackend, margin: f64) -> Result<f64, CutLocus> {
    let mut total = 0.0;
    for f in 0..complex.num_faces() {
        let hol = holonomy(complex, conn, f);
        total += face_profile(backend, &hol, conn.group, complex.face_weights[f], margin)?.0;
    }
    Ok(total)
}

/// `sum_f angle(hol_f)^2 / (2 w_f)`, defined everywhere, plus a flag telling
/// whether some face sits within `margin` of the cut locus.
pub fn angle_energy(complex: &OrientedCellComplex, conn: &Connection, margin: f64) -> (f64, bool) {
    let mut total = 0.0;
    let mut cut = false;
    for f in 0..complex.num_faces() {
        let hol = holonomy(complex, conn, f);
        cut |= hol.log(conn.group, margin).is_err();
        let t = hol.angle();
        total += t * t / (2.0 * complex.face_weights[f]);
    }
    (total, cut)
}

/// Perturbed energy `YM(A) + V(A)`.
pub fn energy(lattice: &Lattice, conn: &Connection, backend: EnergyBackend, bank: &PerturbationBank, margin: f64) -> Result<f64, CutLocus> {
    Ok(ym_energy(&lattice.complex, conn, backend, margin)? + bank.value(lattice, conn))
}

/// `U_e -> g_{s(e)}^-1 U_e g_{t(e)}`.
pub fn apply_gauge(complex: &OrientedCellComplex, conn: &Connection, gauge: &GaugeTransform) -> Connection {
    let edges = complex
        .edges
        .iter()
        .zip(&conn.edges)
        .map(|(&(s, t), u)| gauge.vertices[s].inverse().mul(u).mul(&gauge.vertices[t]))
        .collect();
    Connection { group: conn.group, edges }
}

/// Unique based gauge transformation making every tree edge the identity.
pub fn tree_gauge_fix(complex: &OrientedCellComplex, conn: &Connection, tree: &SpanningTree) -> (Connection, GaugeTransform) {
    let n = complex.num_vertices;
    let mut g: Vec<Option<GroupElement>> = vec![None; n];
    g[tree.root] = Some(GroupElement::IDENTITY);
    // propagate along tree edges until every vertex is assigned
    let mut changed = true;
    while changed {
        changed = false;
        for &e in &tree.tree_edges {
            let (s, t) = complex.edges[e];
            let u = conn.edges[e];
            match (g[s], g[t]) {
                (Some(gs), None) => {
                    g[t] = Some(u.inverse().mul(&gs));
                    changed = true;
                }
                (None, Some(gt)) => {
                    g[s] = Some(u.mul(&gt));
                    changed = true;
                }
                _ => {}
            }
        }
    }
    let gauge = GaugeTransform { vertices: g.into_iter().map(|x| x.expect("tree spans")).collect() };
    let mut fixed = apply_gauge(complex, conn, &gauge);
    for &e in &tree.tree_edges {
        fixed.edges[e] = GroupElement::IDENTITY;
    }
    (fixed, gauge)
}

/// Per-occurrence data of one face: insertion conjugators and holonomy.
struct FaceExpansion {
    hol: GroupElement,
    /// `(edge, sign, prefix product before the inserted exp factor)`
    slots: Vec<(usize, f64, GroupElement)>,
}

fn expand_face(complex: &OrientedCellComplex, conn: &Connection, face: usize) -> FaceExpansion {
    let word = &complex.faces[face].word;
    let mut prefix = GroupElement::IDENTITY;
    let mut slots = Vec::with_capacity(word.len());
    for u in word {
        let g = conn.edges[u.edge];
        if u.forward {
            prefix = prefix.mul(&g);
            slots.push((u.edge, 1.0, prefix));
        } else {
            slots.push((u.edge, -1.0, prefix));
            prefix = prefix.mul(&g.inverse());
        }
    }
    FaceExpansion { hol: prefix, slots }
}

fn re(q: &[f64; 4]) -> f64 {
    q[0]
}

/// Raw first derivatives `dE/d(U_e exp(t X_k))` on free edges (no metric).
fn ym_differential(lattice: &Lattice, conn: &Connection, backend: EnergyBackend, margin: f64) -> Result<DVector<f64>, CutLocus> {
    let complex = &lattice.complex;
    let d = lattice.group.dim();
    let pos = free_positions(lattice);
    let mut out = DVector::zeros(lattice.tangent_dim());
    for f in 0..complex.num_faces() {
        let fx = expand_face(complex, conn, f);
        let (_, d1, _) = face_profile(backend, &fx.hol, conn.group, complex.face_weights[f], margin)?;
        let hv = fx.hol.vector();
        for &(e, sign, pre) in &fx.slots {
            let Some(i) = pos[e] else { continue };
            for k in 0..d {
                let y = pre.ad_inv(&Algebra::e(k)).scale(sign);
                out[i * d + k] += d1 * (-y.dot(&hv));
            }
        }
    }
    Ok(out)
}

fn free_positions(lattice: &Lattice) -> Vec<Option<usize>> {
    let mut pos = vec![None; lattice.complex.num_edges()];
    for (i, &e) in lattice.free_edges().iter().enumerate() {
        pos[e] = Some(i);
    }
    pos
}

/// Metric gradient of the unperturbed energy (`w_e <grad_e, X> = dE`).
pub fn ym_gradient(lattice: &Lattice, conn: &Connection, backend: EnergyBackend, margin: f64) -> Result<TangentField, CutLocus> {
    let mut diff = ym_differential(lattice, conn, backend, margin)?;
    diff.component_div_assign(&lattice.coordinate_weights());
    Ok(lattice.unflatten(&diff))
}

/// Gradient of `YM + V`. The connection is expected to be tree-gauged.
pub fn gradient(lattice: &Lattice, conn: &Connection, backend: EnergyBackend, bank: &PerturbationBank, margin: f64) -> Result<TangentField, CutLocus> {
    let mut g = ym_gradient(lattice, conn, backend, margin)?;
    if !bank.is_empty() {
        g.add_scaled(&bank.gradient(lattice, conn), 1.0);
    }
    Ok(g)
}

/// Symmetric matrix of mixed second derivatives in exponential coordinates
/// `U_e exp(xi_e)` on the free edges, ordered `(free edge, algebra basis)`.
pub fn ym_hessian(lattice: &Lattice, conn: &Connection, backend: EnergyBackend, margin: f64) -> Result<DMatrix<f64>, CutLocus> {
    let complex = &lattice.complex;
    let d = lattice.group.dim();
    let n = lattice.tangent_dim();
    let pos = free_positions(lattice);
    let mut h = DMatrix::zeros(n, n);
    for f in 0..complex.num_faces() {
        let fx = expand_face(complex, conn, f);
        let (_, d1, d2) = face_profile(backend, &fx.hol, conn.group, complex.face_weights[f], margin)?;
        let hol = fx.hol.0;
        let hv = fx.hol.vector();
        // (coordinate, conjugated generator) for every slot on a free edge
        let mut ys: Vec<(usize, usize, Algebra)> = Vec::new();
        for (slot, &(e, sign, pre)) in fx.slots.iter().enumerate() {
            let Some(i) = pos[e] else { continue };
            for k in 0..d {
                ys.push((slot, i * d + k, pre.ad_inv(&Algebra::e(k)).scale(sign)));
            }
        }
        for &(sa, a, ya) in &ys {
            let ga = -ya.dot(&hv);
            for &(sb, b, yb) in &ys {
                let gb = -yb.dot(&hv);
                let second = if sa == sb {
                    -ya.dot(&yb) * hol[0]
                } else if sa < sb {
                    re(&qmul(&qmul(&ya.as_quat(), &yb.as_quat()), &hol))
                } else {
                    re(&qmul(&qmul(&yb.as_quat(), &ya.as_quat()), &hol))
                };
                h[(a, b)] += d2 * ga * gb + d1 * second;
            }
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Hessian of `YM + V`. The perturbation block is a central difference of
/// its analytic gradient (zero outside the supports).
pub fn hessian_matrix(lattice: &Lattice, conn: &Connection, backend: EnergyBackend, bank: &PerturbationBank, margin: f64) -> Result<DMatrix<f64>, CutLocus> {
    let mut h = ym_hessian(lattice, conn, backend, margin)?;
    if !bank.is_empty() && bank.touches(lattice, conn) {
        h += bank.hessian_fd(lattice, conn, 1e-5);
    }
    Ok(h)
}

/// Dimension of `{X : Ad(U_e) X = X for all free e}`.
pub fn stabilizer_dimension(lattice: &Lattice, conn: &Connection) -> usize {
    let d = lattice.group.dim();
    if lattice.group.is_abelian() {
        return d;
    }
    let free = lattice.free_edges();
    if free.is_empty() {
        return d;
    }
    let mut m = DMatrix::zeros(3 * free.len(), 3);
    for (i, &e) in free.iter().enumerate() {
        let a = nalgebra::Matrix3::identity() - conn.edges[e].ad_matrix();
        for r in 0..3 {
            for c in 0..3 {
                m[(3 * i + r, c)] = a[(r, c)];
            }
        }
    }
    let sv = m.svd(false, false).singular_values;
    sv.iter().filter(|&&s| s < 1e-8).count()
}

/// The gauge-fixed Yang-Mills functional as an [`Objective`].
#[derive(Debug, Clone)]
pub struct YangMills {
    pub lattice: Lattice,
    pub backend: EnergyBackend,
    pub bank: PerturbationBank,
    pub cut_margin: f64,
}

impl YangMills {
    pub fn new(lattice: Lattice, backend: EnergyBackend) -> Self {
        Self { lattice, backend, bank: PerturbationBank::default(), cut_margin: DEFAULT_CUT_MARGIN }
    }

    pub fn with_bank(mut self, bank: PerturbationBank) -> Self {
        self.bank = bank;
        self
    }

    pub fn energy(&self, conn: &Connection) -> Result<f64, CutLocus> {
        energy(&self.lattice, conn, self.backend, &self.bank, self.cut_margin)
    }

    pub fn gradient_field(&self, conn: &Connection) -> Result<TangentField, CutLocus> {
        gradient(&self.lattice, conn, self.backend, &self.bank, self.cut_margin)
    }

    pub fn hessian_matrix(&self, conn: &Connection) -> Result<DMatrix<f64>, CutLocus> {
        hessian_matrix(&self.lattice, conn, self.backend, &self.bank, self.cut_margin)
    }

    fn face_holonomies(&self, conn: &Connection) -> Vec<GroupElement> {
        (0..self.lattice.complex.num_faces()).map(|f| holonomy(&self.lattice.complex, conn, f)).collect()
    }
}

impl Objective for YangMills {
    type Point = Connection;

    fn name(&self) -> String {
        format!(
            "ym-{:?}-{:?}-V{}E{}F{}",
            self.lattice.group,
            self.backend,
            self.lattice.complex.num_vertices,
            self.lattice.complex.num_edges(),
            self.lattice.complex.num_faces()
        )
        .to_lowercase()
    }

    fn ambient_dim(&self) -> usize {
        self.lattice.tangent_dim()
    }

    fn manifold_dim(&self) -> usize {
        self.lattice.tangent_dim()
    }

    fn metric(&self) -> DVector<f64> {
        self.lattice.coordinate_weights()
    }

    fn value(&self, p: &Connection) -> Result<f64, ObjectiveError> {
        Ok(self.energy(p)?)
    }

    fn gradient(&self, p: &Connection) -> Result<DVector<f64>, ObjectiveError> {
        Ok(self.lattice.flatten(&self.gradient_field(p)?))
    }

    fn tangent_basis(&self, _p: &Connection) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.metric().map(|w| 1.0 / w.sqrt()))
    }

    fn hessian(&self, p: &Connection) -> Result<DMatrix<f64>, ObjectiveError> {
        let h = self.hessian_matrix(p)?;
        let s = self.metric().map(|w| 1.0 / w.sqrt());
        Ok(DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * s[i] * s[j]))
    }

    fn retract(&self, p: &Connection, v: &DVector<f64>) -> Connection {
        self.lattice.retract(p, &self.lattice.unflatten(v))
    }

    fn log_difference(&self, p: &Connection, q: &Connection) -> DVector<f64> {
        let mut f = self.lattice.zero_field();
        for &e in self.lattice.free_edges() {
            f.values[e] = p.edges[e].inverse().mul(&q.edges[e]).log_unchecked();
        }
        self.lattice.flatten(&f)
    }

    fn distance(&self, p: &Connection, q: &Connection) -> f64 {
        self.lattice
            .free_edges()
            .iter()
            .map(|&e| {
                let d: f64 = (0..4).map(|k| (p.edges[e].0[k] - q.edges[e].0[k]).powi(2)).sum();
                self.lattice.complex.edge_weights[e] * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn random_point(&self, rng: &mut dyn RngCore) -> Connection {
        self.lattice.random_connection(rng)
    }

    fn base_point(&self) -> Connection {
        Connection::identity(self.lattice.group, self.lattice.complex.num_edges())
    }

    fn fingerprint(&self, p: &Connection) -> Result<Vec<f64>, ObjectiveError> {
        let mut fp = vec![self.energy(p)?];
        let hols = self.face_holonomies(p);
        fp.extend(hols.iter().map(|h| h.re_tr()));
        let faces = &self.lattice.complex.faces;
        for f in 1..faces.len() {
            if faces[f].base == faces[f - 1].base {
                fp.push(hols[f - 1].mul(&hols[f]).re_tr());
            }
        }
        Ok(fp)
    }

    fn observables(&self, p: &Connection) -> DVector<f64> {
        let k = self.lattice.group.components();
        let free = self.lattice.free_edges();
        DVector::from_fn(free.len() * k, |i, _| p.edges[free[i / k]].0[i % k])
    }

    fn observable_jacobian(&self, p: &Connection) -> DMatrix<f64> {
        let k = self.lattice.group.components();
        let d = self.lattice.group.dim();
        let free = self.lattice.free_edges();
        let mut j = DMatrix::zeros(free.len() * k, free.len() * d);
        for (i, &e) in free.iter().enumerate() {
            for b in 0..d {
                let dq = qmul(&p.edges[e].0, &Algebra::e(b).as_quat());
                for c in 0..k {
                    j[(i * k + c, i * d + b)] = dq[c];
                }
            }
        }
        j
    }

    fn orbit_dimension(&self, p: &Connection) -> usize {
        self.lattice.group.dim() - stabilizer_dimension(&self.lattice, p)
    }

    fn stabilizer_dimension(&self, p: &Connection) -> usize {
        stabilizer_dimension(&self.lattice, p)
    }

    fn step_jump(&self, p: &Connection, q: &Connection) -> f64 {
        self.face_holonomies(p)
            .iter()
            .zip(self.face_holonomies(q))
            .map(|(a, b)| a.inverse().mul(&b).angle())
            .fold(0.0, f64::max)
    }

    fn constraint_error(&self, p: &Connection) -> f64 {
        p.max_modulus_error()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::DEFAULT_CUT_MARGIN as M;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn close(a: &Connection, b: &Connection, tol: f64) -> bool {
        a.edges.iter().zip(&b.edges).all(|(x, y)| x.0.iter().zip(y.0).all(|(p, q)| (p - q).abs() <= tol))
    }

    fn su2_genus1() -> Lattice {
        Lattice::new(OrientedCellComplex::minimal_genus(1).unwrap(), Group::Su2).unwrap()
    }

    fn u1_grid() -> Lattice {
        Lattice::new(OrientedCellComplex::torus_grid(2, 1).unwrap(), Group::U1).unwrap()
    }

    fn u1(theta: f64) -> GroupElement {
        GroupElement::exp(&Algebra([theta, 0.0, 0.0]))
    }

    #[test]
    fn holonomy_examples() {
        let l = su2_genus1();
        let id = Connection::identity(Group::Su2, 2);
        assert_eq!(holonomy(&l.complex, &id, 0), GroupElement::IDENTITY);
        let ij = Connection { group: Group::Su2, edges: vec![GroupElement([0.0, 1.0, 0.0, 0.0]), GroupElement([0.0, 0.0, 1.0, 0.0])] };
        let hol = holonomy(&l.complex, &ij, 0);
        assert!((hol.0[0] + 1.0).abs() < 1e-15 && hol.vector().norm() < 1e-15);

        let g = u1_grid();
        // face 0 is h0 v1 h0^-1 v0^-1: angles in word order 0.1, 0.2, -0.1, -0.2
        let c = Connection { group: Group::U1, edges: vec![u1(0.1), u1(0.0), u1(0.2), u1(0.2)] };
        assert!(holonomy(&g.complex, &c, 0).u1_angle().abs() < 1e-15);
    }

    #[test]
    fn curvature_examples() {
        let g = u1_grid();
        let c = Connection { group: Group::U1, edges: vec![u1(0.0), u1(0.0), u1(0.0), u1(0.3)] };
        assert!((curvature(&g.complex, &c, 0, M).unwrap().0[0] - 0.3).abs() < 1e-15);
        let l = su2_genus1();
        // hol = a b a^-1 b^-1 with b = 1 is trivial; use a lone-edge word instead
        let x = Algebra([0.2, 0.0, 0.0]);
        let a = GroupElement::exp(&x);
        let mut cx = l.complex.clone();
        cx.faces[0].word = vec![crate::surface::EdgeUse::fwd(0)];
        let conn = Connection { group: Group::Su2, edges: vec![a, GroupElement::IDENTITY] };
        assert!(curvature(&cx, &conn, 0, M).unwrap().sub(&x).norm() < 1e-15);
        assert_eq!(curvature(&l.complex, &Connection::identity(Group::Su2, 2), 0, M).unwrap(), Algebra::ZERO);
    }

    #[test]
    fn energy_examples() {
        let l = su2_genus1();
        let bank = PerturbationBank::default();
        let flat = Connection::identity(Group::Su2, 2);
        assert_eq!(energy(&l, &flat, EnergyBackend::Wilson, &bank, M).unwrap(), 0.0);
        assert_eq!(energy(&l, &flat, EnergyBackend::LogNorm, &bank, M).unwrap(), 0.0);
        let ij = Connection { group: Group::Su2, edges: vec![GroupElement([0.0, 1.0, 0.0, 0.0]), GroupElement([0.0, 0.0, 1.0, 0.0])] };
        assert!((energy(&l, &ij, EnergyBackend::Wilson, &bank, M).unwrap() - 4.0).abs() < 1e-14);
        assert!(energy(&l, &ij, EnergyBackend::LogNorm, &bank, M).is_err());
        let (ang, cut) = angle_energy(&l.complex, &ij, M);
        assert!(cut);
        assert!((ang - PI * PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gauge_examples() {
        let l = su2_genus1();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = l.random_connection(&mut rng);
        assert!(close(&apply_gauge(&l.complex, &c, &GaugeTransform::identity(1)), &c, 1e-15));
        let k = Group::Su2.haar(&mut rng);
        let gc = apply_gauge(&l.complex, &c, &GaugeTransform::constant(1, k));
        let h0 = holonomy(&l.complex, &c, 0);
        let h1 = holonomy(&l.complex, &gc, 0);
        let expected = k.inverse().mul(&h0).mul(&k);
        assert!(h1.0.iter().zip(expected.0).all(|(a, b)| (a - b).abs() < 1e-12));

        let s = Lattice::new(OrientedCellComplex::sphere(), Group::U1).unwrap();
        let c = s.random_connection(&mut rng);
        let gauge = GaugeTransform { vertices: (0..4).map(|_| Group::U1.haar(&mut rng)).collect() };
        let gc = apply_gauge(&s.complex, &c, &gauge);
        for f in 0..4 {
            let a = holonomy(&s.complex, &c, f).u1_angle();
            let b = holonomy(&s.complex, &gc, f).u1_angle();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_gauge_examples() {
        let s = Lattice::new(OrientedCellComplex::sphere(), Group::Su2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = Connection::identity(Group::Su2, 6);
        for e in 0..6 {
            c.edges[e] = Group::Su2.haar(&mut rng);
        }
        let (fixed, gauge) = tree_gauge_fix(&s.complex, &c, &s.tree);
        assert!(gauge.is_based(0));
        for &e in &s.tree.tree_edges {
            assert_eq!(fixed.edges[e], GroupElement::IDENTITY);
        }
        let direct = apply_gauge(&s.complex, &c, &gauge);
        for e in 0..6 {
            assert!(direct.edges[e].0.iter().zip(fixed.edges[e].0).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let bank = PerturbationBank::default();
        let e0 = energy(&s, &c, EnergyBackend::Wilson, &bank, M).unwrap();
        let e1 = energy(&s, &fixed, EnergyBackend::Wilson, &bank, M).unwrap();
        assert!((e0 - e1).abs() < 1e-12);

        let (again, g2) = tree_gauge_fix(&s.complex, &fixed, &s.tree);
        assert!(g2.vertices.iter().all(|g| (g.0[0] - 1.0).abs() < 1e-12));
        assert!(close(&again, &fixed, 1e-12));

        let mut based = GaugeTransform { vertices: (0..4).map(|_| Group::Su2.haar(&mut rng)).collect() };
        based.vertices[0] = GroupElement::IDENTITY;
        let (other, _) = tree_gauge_fix(&s.complex, &apply_gauge(&s.complex, &c, &based), &s.tree);
        for e in 0..6 {
            assert!(other.edges[e].0.iter().zip(fixed.edges[e].0).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn gradient_on_single_perturbed_face() {
        // face 0 holonomy angle = v1 - v0; perturb v1 (edge 3) by s
        let g = u1_grid();
        let s = 0.37;
        let c = Connection { group: Group::U1, edges: vec![u1(0.0), u1(0.0), u1(0.0), u1(s)] };
        let grad = ym_gradient(&g, &c, EnergyBackend::Wilson, M).unwrap();
        // face 0 sees +s, face 1 sees -s; each contributes d/ds 2(1 - cos s) = 2 sin s
        assert!((grad.values[3].0[0] - 4.0 * s.sin()).abs() < 1e-14);
        assert!((grad.values[2].0[0] + 4.0 * s.sin()).abs() < 1e-14);
        assert_eq!(grad.values[0], Algebra::ZERO);
        let flat = ym_gradient(&g, &Connection::identity(Group::U1, 4), EnergyBackend::Wilson, M).unwrap();
        assert!(flat.values.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn hessian_at_flat_grid_is_incidence_laplacian() {
        let g = u1_grid();
        let flat = Connection::identity(Group::U1, 4);
        // free edges [1, 2, 3]; face 0 angle = v1 - v0, face 1 angle = v0 - v1
        let d = DMatrix::from_row_slice(2, 3, &[0.0, -1.0, 1.0, 0.0, 1.0, -1.0]);
        let lap = d.transpose() * &d;
        let hl = ym_hessian(&g, &flat, EnergyBackend::LogNorm, M).unwrap();
        assert!((&hl - &lap).amax() < 1e-14);
        let hw = ym_hessian(&g, &flat, EnergyBackend::Wilson, M).unwrap();
        assert!((&hw - &lap * 2.0).amax() < 1e-14);
        let eig = hw.symmetric_eigenvalues();
        assert!(eig.iter().all(|&x| x >= -1e-9));
    }

    #[test]
    fn stabilizer_examples() {
        let l = su2_genus1();
        let ij = Connection { group: Group::Su2, edges: vec![GroupElement([0.0, 1.0, 0.0, 0.0]), GroupElement([0.0, 0.0, 1.0, 0.0])] };
        assert_eq!(stabilizer_dimension(&l, &ij), 0);
        assert_eq!(stabilizer_dimension(&l, &Connection::identity(Group::Su2, 2)), 3);
        let g = u1_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(stabilizer_dimension(&g, &g.random_connection(&mut rng)), 1);
    }

    #[test]
    fn connection_json_round_trip() {
        let l = su2_genus1();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = l.random_connection(&mut rng);
        let json = c.to_json(&l.complex);
        let back = Connection::from_json(&json, &l.complex).unwrap();
        assert!(back.edges.iter().zip(&c.edges).all(|(a, b)| a.0.iter().zip(b.0).all(|(x, y)| (x - y).abs() < 1e-15)));
        let other = OrientedCellComplex::minimal_genus(2).unwrap();
        assert!(Connection::from_json(&json, &other).is_err());
    }

    fn random_near(l: &Lattice, scale: f64, rng: &mut ChaCha8Rng) -> Connection {
        let mut v = l.zero_field();
        for &e in l.free_edges() {
            v.values[e] = l.group.random_algebra(rng, scale);
        }
        l.retract(&Connection::identity(l.group, l.complex.num_edges()), &v)
    }

    fn lattices() -> Vec<Lattice> {
        vec![
            su2_genus1(),
            Lattice::new(OrientedCellComplex::minimal_genus(2).unwrap(), Group::Su2).unwrap(),
            Lattice::new(OrientedCellComplex::sphere(), Group::Su2).unwrap(),
            Lattice::new(OrientedCellComplex::torus_grid(2, 2).unwrap(), Group::U1).unwrap(),
            Lattice::new(OrientedCellComplex::minimal_genus(2).unwrap(), Group::U1).unwrap(),
        ]
    }

    fn sample(l: &Lattice, backend: EnergyBackend, rng: &mut ChaCha8Rng) -> Connection {
        match backend {
            EnergyBackend::Wilson => l.random_connection(rng),
            EnergyBackend::LogNorm => random_near(l, 0.4, rng),
        }
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for l in lattices() {
            for backend in [EnergyBackend::Wilson, EnergyBackend::LogNorm] {
                for _ in 0..20 {
                    let c = sample(&l, backend, &mut rng);
                    let n = l.tangent_dim();
                    let w = l.coordinate_weights();
                    let g = l.flatten(&ym_gradient(&l, &c, backend, M).unwrap());
                    let hess = ym_hessian(&l, &c, backend, M).unwrap();
                    let mut fd_h = DMatrix::zeros(n, n);
                    for j in 0..n {
                        let mut v = DVector::zeros(n);
                        v[j] = h;
                        let cp = l.retract(&c, &l.unflatten(&v));
                        let cm = l.retract(&c, &l.unflatten(&-&v));
                        let ep = ym_energy(&l.complex, &cp, backend, M).unwrap();
                        let em = ym_energy(&l.complex, &cm, backend, M).unwrap();
                        let fd = (ep - em) / (2.0 * h);
                        let an = g[j] * w[j];
                        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{backend:?} {fd} {an}");
                        let gp = l.flatten(&ym_gradient(&l, &cp, backend, M).unwrap()).component_mul(&w);
                        let gm = l.flatten(&ym_gradient(&l, &cm, backend, M).unwrap()).component_mul(&w);
                        fd_h.set_column(j, &((gp - gm) / (2.0 * h)));
                    }
                    let fd_h = (&fd_h + fd_h.transpose()) * 0.5;
                    assert!((&hess - hess.transpose()).amax() < 1e-9);
                    let scale = hess.amax().max(1.0);
                    assert!((&fd_h - &hess).amax() <= 1e-5 * scale, "{backend:?} {}", (&fd_h - &hess).amax());
                }
            }
        }
    }

    #[test]
    fn energy_is_gauge_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bank = PerturbationBank::default();
        for l in lattices() {
            for _ in 0..20 {
                let c = random_near(&l, 0.5, &mut rng);
                let mut all = Connection::identity(l.group, l.complex.num_edges());
                for e in 0..all.edges.len() {
                    all.edges[e] = c.edges[e].right_exp(&l.group.random_algebra(&mut rng, 0.1));
                }
                let gauge = GaugeTransform { vertices: (0..l.complex.num_vertices).map(|_| l.group.haar(&mut rng)).collect() };
                let moved = apply_gauge(&l.complex, &all, &gauge);
                for backend in [EnergyBackend::Wilson, EnergyBackend::LogNorm] {
                    let e0 = energy(&l, &all, backend, &bank, M).unwrap();
                    let e1 = energy(&l, &moved, backend, &bank, M).unwrap();
                    assert!((e0 - e1).abs() <= 1e-12 * (1.0 + e0.abs()));
                }
            }
        }
    }

    #[test]
    fn gradient_is_conjugation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let l = Lattice::new(OrientedCellComplex::minimal_genus(2).unwrap(), Group::Su2).unwrap();
        for _ in 0..10 {
            let c = l.random_connection(&mut rng);
            let k = Group::Su2.haar(&mut rng);
            let moved = apply_gauge(&l.complex, &c, &GaugeTransform::constant(1, k));
            let g0 = ym_gradient(&l, &c, EnergyBackend::Wilson, M).unwrap();
            let g1 = ym_gradient(&l, &moved, EnergyBackend::Wilson, M).unwrap();
            for e in 0..g0.values.len() {
                assert!(k.ad(&g0.values[e]).sub(&g1.values[e]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn wilson_is_twice_lognorm_to_quartic_order() {
        let l = Lattice::new(OrientedCellComplex::minimal_genus(2).unwrap(), Group::Su2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dir: Vec<Algebra> = (0..4).map(|_| Group::Su2.random_algebra(&mut rng, 0.6)).collect();
        let mut ratios = Vec::new();
        for t in [1.0, 0.5, 0.25, 0.125] {
            let mut f = l.zero_field();
            for (e, d) in dir.iter().enumerate() {
                f.values[e] = d.scale(t);
            }
            let c = l.retract(&Connection::identity(Group::Su2, 4), &f);
            let ew = ym_energy(&l.complex, &c, EnergyBackend::Wilson, M).unwrap();
            let el = ym_energy(&l.complex, &c, EnergyBackend::LogNorm, M).unwrap();
            ratios.push(((ew - 2.0 * el) / (el * el)).abs());
        }
        let first = ratios[0].max(1.0);
        assert!(ratios.iter().all(|r| *r <= 10.0 * first), "{ratios:?}");
    }

    #[test]
    fn orbit_directions_are_null_at_critical_points() {
        let l = su2_genus1();
        let ij = Connection { group: Group::Su2, edges: vec![GroupElement([0.0, 1.0, 0.0, 0.0]), GroupElement([0.0, 0.0, 1.0, 0.0])] };
        let g = ym_gradient(&l, &ij, EnergyBackend::Wilson, M).unwrap();
        assert!(g.norm_sq(&l.complex).sqrt() < 1e-10);
        let h = ym_hessian(&l, &ij, EnergyBackend::Wilson, M).unwrap();
        let eig = h.symmetric_eigenvalues();
        let kernel = eig.iter().filter(|x| x.abs() < 1e-8).count();
        assert!(kernel >= 3 - stabilizer_dimension(&l, &ij));
    }

    #[test]
    fn perturbed_objective_passes_gradient_audit() {
        use crate::objective::gradient_audit;
        use crate::perturbation::{BankTerm, ModelPerturbation};
        let l = Lattice::new(OrientedCellComplex::minimal_genus(2).unwrap(), Group::Su2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let m = ModelPerturbation::random(&l, 1, &mut rng);
        let mut v = l.zero_field();
        for &e in l.free_edges() {
            v.values[e] = Group::Su2.random_algebra(&mut rng, 0.2);
        }
        let p = l.retract(&m.reference, &v);
        let ym = YangMills::new(l, EnergyBackend::Wilson).with_bank(PerturbationBank::new(vec![BankTerm { perturbation: m, lambda: 0.3 }]));
        assert!(ym.bank.value(&ym.lattice, &p) != 0.0);
        assert!(gradient_audit(&ym, &p, &mut rng, 8, 1e-5).unwrap() < 1e-6);
        let h = ym.hessian(&p).unwrap();
        assert!((&h - h.transpose()).amax() < 1e-9);
    }
}
