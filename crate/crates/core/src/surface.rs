//! Combinatorial closed oriented surfaces.
//!
//! A surface is stored as a 2-dimensional cell complex: vertices, oriented
//! edges and faces. Every face carries an explicit base vertex and an ordered
//! boundary word of signed edges, so that face holonomies are well defined as
//! group elements (not just up to conjugation).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComplexError {
    #[error("genus must be at least 1 for the minimal complex (got {0}); use the sphere builder for genus 0")]
    ZeroGenus(usize),
    #[error("degenerate abelian word: a {0}x{1} torus grid has a single commutator face")]
    DegenerateGrid(usize, usize),
    #[error("complex is disconnected: vertex {0} unreachable from root")]
    Disconnected(usize),
    #[error("root vertex {0} out of range")]
    BadRoot(usize),
    #[error("malformed complex document: {0}")]
    Malformed(String),
}

/// One letter of a face boundary word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeUse {
    pub edge: usize,
    pub forward: bool,
}

impl EdgeUse {
    pub fn fwd(edge: usize) -> Self {
        Self { edge, forward: true }
    }

    pub fn inv(edge: usize) -> Self {
        Self { edge, forward: false }
    }

    /// Signed encoding `±(edge + 1)`, so edge 0 keeps a sign.
    pub fn encode(self) -> i64 {
        let v = self.edge as i64 + 1;
        if self.forward {
            v
        } else {
            -v
        }
    }

    pub fn decode(code: i64) -> Option<Self> {
        if code == 0 {
            return None;
        }
        Some(Self {
            edge: (code.unsigned_abs() - 1) as usize,
            forward: code > 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub base: usize,
    pub word: Vec<EdgeUse>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientedCellComplex {
    pub num_vertices: usize,
    /// `(source, target)` per edge.
    pub edges: Vec<(usize, usize)>,
    pub faces: Vec<Face>,
    pub genus: usize,
    pub face_weights: Vec<f64>,
    pub edge_weights: Vec<f64>,
    pub base_vertex: usize,
}

/// Breadth-first spanning tree; its complement indexes the gauge-fixed
/// configuration space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanningTree {
    pub root: usize,
    pub tree_edges: Vec<usize>,
    pub free_edges: Vec<usize>,
    is_tree: Vec<bool>,
}

impl SpanningTree {
    pub fn contains(&self, edge: usize) -> bool {
        self.is_tree[edge]
    }

    pub fn num_edges(&self) -> usize {
        self.is_tree.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<InvariantCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl OrientedCellComplex {
    /// One vertex, `2g` edges and the single face `a1 b1 a1^-1 b1^-1 ... ag bg ag^-1 bg^-1`.
    pub fn minimal_genus(g: usize) -> Result<Self, ComplexError> {
        if g == 0 {
            return Err(ComplexError::ZeroGenus(g));
        }
        let edges = vec![(0, 0); 2 * g];
        let mut word = Vec::with_capacity(4 * g);
        for i in 0..g {
            let (a, b) = (2 * i, 2 * i + 1);
            word.extend([EdgeUse::fwd(a), EdgeUse::fwd(b), EdgeUse::inv(a), EdgeUse::inv(b)]);
        }
        Ok(Self::with_unit_weights(1, edges, vec![Face { base: 0, word }], g))
    }

    /// `n x m` periodic quadrilateral grid. Vertex `(i, j)` has index `i + n*j`,
    /// horizontal edge `(i, j) -> (i+1, j)` index `i + n*j`, vertical edge
    /// `(i, j) -> (i, j+1)` index `n*m + i + n*j`.
    pub fn torus_grid(n: usize, m: usize) -> Result<Self, ComplexError> {
        if n * m < 2 {
            return Err(ComplexError::DegenerateGrid(n, m));
        }
        let nv = n * m;
        let vid = |i: usize, j: usize| (i % n) + n * (j % m);
        let h = |i: usize, j: usize| (i % n) + n * (j % m);
        let v = |i: usize, j: usize| nv + (i % n) + n * (j % m);
        let mut edges = vec![(0, 0); 2 * nv];
        let mut faces = Vec::with_capacity(nv);
        for j in 0..m {
            for i in 0..n {
                edges[h(i, j)] = (vid(i, j), vid(i + 1, j));
                edges[v(i, j)] = (vid(i, j), vid(i, j + 1));
            }
        }
        for j in 0..m {
            for i in 0..n {
                faces.push(Face {
                    base: vid(i, j),
                    word: vec![
                        EdgeUse::fwd(h(i, j)),
                        EdgeUse::fwd(v(i + 1, j)),
                        EdgeUse::inv(h(i, j + 1)),
                        EdgeUse::inv(v(i, j)),
                    ],
                });
            }
        }
        Ok(Self::with_unit_weights(nv, edges, faces, 1))
    }

    /// Boundary of the tetrahedron, outward oriented.
    pub fn sphere() -> Self {
        let edges = vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let f = |base, w: &[i64]| Face {
            base,
            word: w.iter().map(|&c| EdgeUse::decode(c).unwrap()).collect(),
        };
        let faces = vec![
            f(0, &[1, 4, -2]),
            f(0, &[3, -5, -1]),
            f(0, &[2, 6, -3]),
            f(1, &[5, -6, -4]),
        ];
        Self::with_unit_weights(4, edges, faces, 0)
    }

    fn with_unit_weights(nv: usize, edges: Vec<(usize, usize)>, faces: Vec<Face>, genus: usize) -> Self {
        let (ne, nf) = (edges.len(), faces.len());
        Self {
            num_vertices: nv,
            edges,
            faces,
            genus,
            face_weights: vec![1.0; nf],
            edge_weights: vec![1.0; ne],
            base_vertex: 0,
        }
    }

    /// Rescales face weights so they sum to `area`.
    pub fn normalize_area(mut self, area: f64) -> Self {
        let total: f64 = self.face_weights.iter().sum();
        for w in &mut self.face_weights {
            *w *= area / total;
        }
        self
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices as i64 - self.num_edges() as i64 + self.num_faces() as i64
    }

    /// Deterministic BFS tree; neighbours are explored in edge-index order.
    pub fn spanning_tree(&self, root: usize) -> Result<SpanningTree, ComplexError> {
        if root >= self.num_vertices {
            return Err(ComplexError::BadRoot(root));
        }
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); self.num_vertices];
        for (e, &(s, t)) in self.edges.iter().enumerate() {
            incident[s].push(e);
            if t != s {
                incident[t].push(e);
            }
        }
        let mut seen = vec![false; self.num_vertices];
        let mut is_tree = vec![false; self.num_edges()];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            for &e in &incident[u] {
                let (s, t) = self.edges[e];
                let w = if s == u { t } else { s };
                if !seen[w] {
                    seen[w] = true;
                    is_tree[e] = true;
                    queue.push_back(w);
                }
            }
        }
        if let Some(v) = seen.iter().position(|&s| !s) {
            return Err(ComplexError::Disconnected(v));
        }
        let tree_edges = (0..self.num_edges()).filter(|&e| is_tree[e]).collect();
        let free_edges = (0..self.num_edges()).filter(|&e| !is_tree[e]).collect();
        Ok(SpanningTree { root, tree_edges, free_edges, is_tree })
    }

    pub fn validate(&self) -> ValidationReport {
        let mut checks = Vec::new();

        let chi = self.euler_characteristic();
        let expected = 2 - 2 * self.genus as i64;
        checks.push(InvariantCheck {
            name: "euler_characteristic",
            passed: chi == expected,
            detail: format!("V-E+F = {chi}, 2-2g = {expected}"),
        });

        let indices_ok = self.edges.iter().all(|&(s, t)| s < self.num_vertices && t < self.num_vertices)
            && self.faces.iter().all(|f| f.base < self.num_vertices && f.word.iter().all(|u| u.edge < self.num_edges()))
            && self.base_vertex < self.num_vertices;
        checks.push(InvariantCheck {
            name: "indices_in_range",
            passed: indices_ok,
            detail: String::new(),
        });

        let mut plus = vec![0usize; self.num_edges()];
        let mut minus = vec![0usize; self.num_edges()];
        if indices_ok {
            for f in &self.faces {
                for u in &f.word {
                    if u.forward {
                        plus[u.edge] += 1;
                    } else {
                        minus[u.edge] += 1;
                    }
                }
            }
        }
        let bad: Vec<usize> = (0..self.num_edges()).filter(|&e| plus[e] != 1 || minus[e] != 1).collect();
        checks.push(InvariantCheck {
            name: "oriented_edge_pairing",
            passed: indices_ok && bad.is_empty(),
            detail: if bad.is_empty() { String::new() } else { format!("edges {bad:?} not used once with each sign") },
        });

        let mut open = Vec::new();
        if indices_ok {
            for (fi, f) in self.faces.iter().enumerate() {
                let mut at = f.base;
                let mut ok = !f.word.is_empty();
                for u in &f.word {
                    let (s, t) = self.edges[u.edge];
                    let (from, to) = if u.forward { (s, t) } else { (t, s) };
                    if from != at {
                        ok = false;
                        break;
                    }
                    at = to;
                }
                if !ok || at != f.base {
                    open.push(fi);
                }
            }
        }
        checks.push(InvariantCheck {
            name: "closed_boundary_walks",
            passed: indices_ok && open.is_empty(),
            detail: if open.is_empty() { String::new() } else { format!("faces {open:?} not closed at base") },
        });

        let weights_ok = self.face_weights.len() == self.num_faces()
            && self.edge_weights.len() == self.num_edges()
            && self.face_weights.iter().chain(&self.edge_weights).all(|&w| w > 0.0 && w.is_finite());
        checks.push(InvariantCheck {
            name: "positive_weights",
            passed: weights_ok,
            detail: String::new(),
        });

        ValidationReport { checks }
    }

    pub fn to_document(&self) -> ComplexDocument {
        ComplexDocument {
            vertices: self.num_vertices,
            edges: self.edges.iter().map(|&(s, t)| [s, t]).collect(),
            faces: self
                .faces
                .iter()
                .map(|f| FaceDocument {
                    base: f.base,
                    word: f.word.iter().map(|u| u.encode()).collect(),
                })
                .collect(),
            weights: WeightsDocument {
                faces: self.face_weights.clone(),
                edges: self.edge_weights.clone(),
            },
            genus: self.genus,
            base_vertex: self.base_vertex,
        }
    }

    pub fn from_document(doc: &ComplexDocument) -> Result<Self, ComplexError> {
        let faces = doc
            .faces
            .iter()
            .map(|f| {
                let word = f
                    .word
                    .iter()
                    .map(|&c| EdgeUse::decode(c).ok_or_else(|| ComplexError::Malformed("zero edge code".into())))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Face { base: f.base, word })
            })
            .collect::<Result<Vec<_>, ComplexError>>()?;
        Ok(Self {
            num_vertices: doc.vertices,
            edges: doc.edges.iter().map(|e| (e[0], e[1])).collect(),
            faces,
            genus: doc.genus,
            face_weights: doc.weights.faces.clone(),
            edge_weights: doc.weights.edges.clone(),
            base_vertex: doc.base_vertex,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("complex serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ComplexError> {
        let doc: ComplexDocument = serde_json::from_str(s).map_err(|e| ComplexError::Malformed(e.to_string()))?;
        Self::from_document(&doc)
    }

    /// SHA-256 of the canonical JSON document, hex encoded.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_document()).expect("complex serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceDocument {
    pub base: usize,
    pub word: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsDocument {
    pub faces: Vec<f64>,
    pub edges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexDocument {
    pub vertices: usize,
    pub edges: Vec<[usize; 2]>,
    pub faces: Vec<FaceDocument>,
    pub weights: WeightsDocument,
    pub genus: usize,
    pub base_vertex: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_genus_counts() {
        let t = OrientedCellComplex::minimal_genus(1).unwrap();
        assert_eq!((t.num_vertices, t.num_edges(), t.num_faces()), (1, 2, 1));
        assert_eq!(t.euler_characteristic(), 0);
        let g2 = OrientedCellComplex::minimal_genus(2).unwrap();
        assert_eq!(g2.euler_characteristic(), -2);
        assert!(g2.validate().passed());
        assert_eq!(OrientedCellComplex::minimal_genus(0), Err(ComplexError::ZeroGenus(0)));
    }

    #[test]
    fn minimal_genus_tree_is_empty() {
        let t = OrientedCellComplex::minimal_genus(1).unwrap();
        let tree = t.spanning_tree(0).unwrap();
        assert!(tree.tree_edges.is_empty());
        assert_eq!(tree.free_edges, vec![0, 1]);
    }

    #[test]
    fn torus_grid_counts() {
        let g = OrientedCellComplex::torus_grid(2, 1).unwrap();
        assert_eq!((g.num_vertices, g.num_edges(), g.num_faces()), (2, 4, 2));
        assert_eq!(g.euler_characteristic(), 0);
        let g = OrientedCellComplex::torus_grid(2, 2).unwrap();
        assert_eq!((g.num_vertices, g.num_edges(), g.num_faces()), (4, 8, 4));
        let err = OrientedCellComplex::torus_grid(1, 1).unwrap_err();
        assert!(err.to_string().contains("degenerate abelian word"));
    }

    #[test]
    fn grid_tree_sizes() {
        let g = OrientedCellComplex::torus_grid(2, 1).unwrap();
        let tree = g.spanning_tree(0).unwrap();
        assert_eq!(tree.tree_edges, vec![0]);
        assert_eq!(tree.free_edges, vec![1, 2, 3]);
    }

    #[test]
    fn sphere_structure() {
        let s = OrientedCellComplex::sphere();
        assert_eq!(s.euler_characteristic(), 2);
        assert!(s.validate().passed());
        let tree = s.spanning_tree(0).unwrap();
        assert_eq!(tree.tree_edges.len(), 3);
        assert_eq!(tree.free_edges.len(), 3);
    }

    #[test]
    fn validation_catches_flipped_sign() {
        let mut t = OrientedCellComplex::minimal_genus(1).unwrap();
        t.faces[0].word[2].forward = true;
        let report = t.validate();
        assert!(!report.passed());
        assert!(!report.check("oriented_edge_pairing").unwrap().passed);
    }

    #[test]
    fn validation_catches_negative_weight() {
        let mut t = OrientedCellComplex::minimal_genus(1).unwrap();
        t.face_weights[0] = -1.0;
        let report = t.validate();
        assert!(!report.check("positive_weights").unwrap().passed);
        assert!(report.check("euler_characteristic").unwrap().passed);
    }

    #[test]
    fn disconnected_is_rejected() {
        let mut s = OrientedCellComplex::sphere();
        s.num_vertices = 5;
        assert_eq!(s.spanning_tree(0), Err(ComplexError::Disconnected(4)));
    }

    #[test]
    fn json_round_trip_keeps_sign_of_edge_zero() {
        let s = OrientedCellComplex::sphere();
        let json = s.to_json();
        assert!(json.contains("-1"));
        assert_eq!(OrientedCellComplex::from_json(&json).unwrap(), s);
    }

    #[test]
    fn area_normalization() {
        let g = OrientedCellComplex::torus_grid(2, 2).unwrap().normalize_area(1.0);
        assert!((g.face_weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
