//! Z/2 chain complexes graded by Ind.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::cascade::{CascadeCount, CertifiedLine};
use super::auxiliary::HCriticalPoint;
use super::MorseBottError;

/// Dense matrix over Z/2 with rows packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(64).max(1);
        Self { rows, cols, words, data: vec![0; rows * words] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.words + c / 64] >> (c % 64) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        let w = &mut self.data[r * self.words + c / 64];
        if v {
            *w |= 1 << (c % 64);
        } else {
            *w &= !(1 << (c % 64));
        }
    }

    pub fn flip(&mut self, r: usize, c: usize) {
        self.data[r * self.words + c / 64] ^= 1 << (c % 64);
    }

    fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.words..(r + 1) * self.words]
    }

    /// Product `self * other` over Z/2.
    pub fn mul(&self, other: &BitMatrix) -> BitMatrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = BitMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                if self.get(r, k) {
                    for w in 0..out.words {
                        out.data[r * out.words + w] ^= other.row(k)[w];
                    }
                }
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&w| w == 0)
    }

    /// Rank by Gaussian elimination over Z/2.
    pub fn rank(&self) -> usize {
        let mut m: Vec<Vec<u64>> = (0..self.rows).map(|r| self.row(r).to_vec()).collect();
        let mut rank = 0;
        for c in 0..self.cols {
            let (w, b) = (c / 64, 1u64 << (c % 64));
            let Some(p) = (rank..m.len()).find(|&r| m[r][w] & b != 0) else { continue };
            m.swap(rank, p);
            let pivot = m[rank].clone();
            for (r, row) in m.iter_mut().enumerate() {
                if r != rank && row[w] & b != 0 {
                    row.iter_mut().zip(&pivot).for_each(|(x, y)| *x ^= y);
                }
            }
            rank += 1;
        }
        rank
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows).map(|r| (0..self.cols).map(|c| u8::from(self.get(r, c))).collect()).collect()
    }
}

impl Serialize for BitMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorRecord {
    pub id: usize,
    pub manifold: usize,
    #[serde(rename = "point-hash")]
    pub point_hash: String,
    pub energy: f64,
    pub h_value: f64,
    pub ind_ym: usize,
    pub ind_h: usize,
    #[serde(rename = "Ind")]
    pub ind: usize,
}

impl GeneratorRecord {
    pub fn new<P: Serialize>(id: usize, energy: f64, p: &HCriticalPoint<P>) -> Self {
        let bytes = serde_json::to_vec(&p.point).expect("points serialize");
        Self {
            id,
            manifold: p.manifold,
            point_hash: hex::encode(Sha256::digest(&bytes)),
            energy,
            h_value: p.h_value,
            ind_ym: p.ind_ym,
            ind_h: p.ind_h,
            ind: p.Ind(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvenanceEntry {
    pub from: usize,
    pub to: usize,
    pub parity: u8,
    pub method: String,
    pub lines: Vec<CertifiedLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeChainComplex {
    pub generators: Vec<GeneratorRecord>,
    /// Generator ids in each degree, in matrix order.
    pub degrees: BTreeMap<usize, Vec<usize>>,
    /// `boundaries[k]` has one row per degree-k generator and one column
    /// per degree-(k-1) generator.
    pub boundaries: BTreeMap<usize, BitMatrix>,
    pub provenance: Vec<ProvenanceEntry>,
    /// Set when degenerate components were left out.
    pub partial: bool,
    pub excluded_manifolds: Vec<usize>,
}

/// Assembles the boundary matrices from pair counts.
pub fn boundary_matrices(generators: Vec<GeneratorRecord>, counts: &[CascadeCount]) -> CascadeChainComplex {
    let mut degrees: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for g in &generators {
        degrees.entry(g.ind).or_default().push(g.id);
    }
    let position = |id: usize| -> (usize, usize) {
        let ind = generators.iter().find(|g| g.id == id).expect("count refers to a generator").ind;
        (ind, degrees[&ind].iter().position(|&i| i == id).expect("generator is graded"))
    };
    let mut boundaries = BTreeMap::new();
    for (&k, rows) in &degrees {
        if k == 0 {
            continue;
        }
        let cols = degrees.get(&(k - 1)).map_or(0, Vec::len);
        boundaries.insert(k, BitMatrix::zeros(rows.len(), cols));
    }
    let mut provenance = Vec::new();
    for c in counts {
        let (kf, r) = position(c.from);
        let (kt, col) = position(c.to);
        assert_eq!(kf, kt + 1, "counts connect adjacent degrees");
        if c.parity == 1 {
            boundaries.get_mut(&kf).expect("degree has a boundary").set(r, col, true);
        }
        provenance.push(ProvenanceEntry { from: c.from, to: c.to, parity: c.parity, method: c.method.clone(), lines: c.lines.clone() });
    }
    CascadeChainComplex { generators, degrees, boundaries, provenance, partial: false, excluded_manifolds: vec![] }
}

/// Checks that every composite of consecutive boundary maps vanishes.
pub fn verify_chain(cc: &CascadeChainComplex) -> bool {
    cc.boundaries.iter().all(|(&k, upper)| match cc.boundaries.get(&(k - 1)) {
        Some(lower) if upper.cols() == lower.rows() => upper.mul(lower).is_zero(),
        Some(_) => false,
        None => true,
    })
}

/// Z/2 Betti numbers `b_0, ..., b_top`.
pub fn homology(cc: &CascadeChainComplex) -> Result<Vec<usize>, MorseBottError> {
    if !verify_chain(cc) {
        return Err(MorseBottError::ChainNotVerified);
    }
    let Some(&top) = cc.degrees.keys().next_back() else { return Ok(vec![]) };
    let rank = |k: usize| cc.boundaries.get(&k).map_or(0, BitMatrix::rank);
    Ok((0..=top)
        .map(|k| {
            let n = cc.degrees.get(&k).map_or(0, Vec::len);
            n - rank(k) - rank(k + 1)
        })
        .collect())
}

impl CascadeChainComplex {
    pub fn to_json(&self) -> serde_json::Value {
        let boundaries: BTreeMap<String, &BitMatrix> = self.boundaries.iter().map(|(k, m)| (k.to_string(), m)).collect();
        serde_json::json!({
            "generators": self.generators,
            "boundaries": boundaries,
            "betti": homology(self).ok(),
            "verified": verify_chain(self),
            "partial": self.partial,
            "excluded_manifolds": self.excluded_manifolds,
            "provenance": self.provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gen(id: usize, ind: usize) -> GeneratorRecord {
        GeneratorRecord { id, manifold: 0, point_hash: String::new(), energy: 0.0, h_value: 0.0, ind_ym: 0, ind_h: ind, ind }
    }

    fn count(from: usize, to: usize, parity: u8) -> CascadeCount {
        CascadeCount { from, to, parity, method: "fixture".into(), lines: vec![] }
    }

    /// Generators of the sphere complex: h-min, h-max, north, south.
    fn sphere_complex(extra: bool) -> CascadeChainComplex {
        let gens = vec![gen(0, 0), gen(1, 1), gen(2, 2), gen(3, 2)];
        let mut counts = vec![count(1, 0, 0), count(2, 1, 1), count(3, 1, 1)];
        if extra {
            counts[0].parity = 1;
        }
        boundary_matrices(gens, &counts)
    }

    #[test]
    fn sphere_complex_homology() {
        let cc = sphere_complex(false);
        assert!(verify_chain(&cc));
        assert_eq!(homology(&cc).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn injected_wrong_count_breaks_chain() {
        let cc = sphere_complex(true);
        assert!(!verify_chain(&cc));
        assert_eq!(homology(&cc), Err(MorseBottError::ChainNotVerified));
    }

    #[test]
    fn empty_complex_is_verified() {
        let cc = boundary_matrices(vec![], &[]);
        assert!(verify_chain(&cc));
        assert_eq!(homology(&cc).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn zero_boundaries_give_generator_counts() {
        let gens = vec![gen(0, 0), gen(1, 1), gen(2, 1), gen(3, 1), gen(4, 2), gen(5, 2), gen(6, 2), gen(7, 3)];
        let cc = boundary_matrices(gens, &[]);
        assert_eq!(homology(&cc).unwrap(), vec![1, 3, 3, 1]);
    }

    #[test]
    fn json_export_has_expected_keys() {
        let v = sphere_complex(false).to_json();
        for key in ["generators", "boundaries", "betti", "provenance"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["boundaries"]["2"], serde_json::json!([[1], [1]]));
    }

    fn naive_rank(rows: &[Vec<bool>]) -> usize {
        let mut m: Vec<Vec<bool>> = rows.to_vec();
        let cols = m.first().map_or(0, Vec::len);
        let mut r = 0;
        for c in 0..cols {
            if let Some(p) = (r..m.len()).find(|&i| m[i][c]) {
                m.swap(r, p);
                for i in 0..m.len() {
                    if i != r && m[i][c] {
                        let pivot = m[r].clone();
                        m[i].iter_mut().zip(pivot).for_each(|(a, b)| *a ^= b);
                    }
                }
                r += 1;
            }
        }
        r
    }

    proptest! {
        #[test]
        fn rank_matches_naive_elimination(rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 70), 0..9)) {
            let mut m = BitMatrix::zeros(rows.len(), 70);
            for (r, row) in rows.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    m.set(r, c, v);
                }
            }
            prop_assert_eq!(m.rank(), naive_rank(&rows));
        }

        #[test]
        fn rank_of_product_is_bounded(a in prop::collection::vec(any::<bool>(), 20), b in prop::collection::vec(any::<bool>(), 20)) {
            let mut x = BitMatrix::zeros(4, 5);
            let mut y = BitMatrix::zeros(5, 4);
            for i in 0..20 {
                x.set(i / 5, i % 5, a[i]);
                y.set(i / 4, i % 4, b[i]);
            }
            let p = x.mul(&y);
            prop_assert!(p.rank() <= x.rank().min(y.rank()));
        }
    }
}
