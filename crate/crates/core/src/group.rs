//! Structure groups U(1) and SU(2).
//!
//! Both groups share one representation: unit quaternions `(q0, q1, q2, q3)`.
//! U(1) is the circle `{cos t + sin t * e1}` inside SU(2), so every product,
//! inverse and adjoint formula below is written once. Lie algebra elements are
//! pure quaternions stored as 3-vectors; U(1) uses only the `e1` component.
//!
//! Conventions:
//! * `exp(X) = cos|X| + sin|X| X/|X|`
//! * inner product `<X, Y> = X . Y`
//! * `[X, Y] = XY - YX = 2 X x Y`
//! * `ad(g, X) = g^-1 X g`

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CUT_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("logarithm undefined at cut locus: element {element:?}")]
pub struct CutLocus {
    pub element: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    U1,
    Su2,
}

/// Pure quaternion `v1 e1 + v2 e2 + v3 e3`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Algebra(pub [f64; 3]);

/// Unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupElement(pub [f64; 4]);

impl Algebra {
    pub const ZERO: Algebra = Algebra([0.0; 3]);

    pub fn e(i: usize) -> Self {
        let mut v = [0.0; 3];
        v[i] = 1.0;
        Algebra(v)
    }

    pub fn dot(&self, other: &Algebra) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn cross(&self, o: &Algebra) -> Algebra {
        let (a, b) = (self.0, o.0);
        Algebra([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])
    }

    pub fn scale(&self, s: f64) -> Algebra {
        Algebra(self.0.map(|x| x * s))
    }

    pub fn add(&self, o: &Algebra) -> Algebra {
        Algebra([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }

    pub fn sub(&self, o: &Algebra) -> Algebra {
        self.add(&o.scale(-1.0))
    }

    pub fn as_quat(&self) -> [f64; 4] {
        [0.0, self.0[0], self.0[1], self.0[2]]
    }
}

pub fn inner(x: &Algebra, y: &Algebra) -> f64 {
    x.dot(y)
}

pub fn bracket(x: &Algebra, y: &Algebra) -> Algebra {
    x.cross(y).scale(2.0)
}

/// Hamilton product.
pub fn qmul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn qconj(a: &[f64; 4]) -> [f64; 4] {
    [a[0], -a[1], -a[2], -a[3]]
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement([1.0, 0.0, 0.0, 0.0]);

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn renormalized(self) -> Self {
        let n = self.0.iter().map(|x| x * x).sum::<f64>().sqrt();
        GroupElement(self.0.map(|x| x / n))
    }

    pub fn mul(&self, other: &GroupElement) -> GroupElement {
        GroupElement(qmul(&self.0, &other.0)).renormalized()
    }

    pub fn inverse(&self) -> GroupElement {
        GroupElement(qconj(&self.0))
    }

    pub fn modulus_error(&self) -> f64 {
        (self.0.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs()
    }

    pub fn re_tr(&self) -> f64 {
        2.0 * self.0[0]
    }

    pub fn vector(&self) -> Algebra {
        Algebra([self.0[1], self.0[2], self.0[3]])
    }

    /// Rotation angle `|log U|` in `[0, pi]`; defined everywhere.
    pub fn angle(&self) -> f64 {
        self.vector().norm().atan2(self.0[0])
    }

    /// Signed U(1) angle in `(-pi, pi]`.
    pub fn u1_angle(&self) -> f64 {
        let a = self.0[1].atan2(self.0[0]);
        if a <= -PI {
            PI
        } else {
            a
        }
    }

    pub fn exp(x: &Algebra) -> GroupElement {
        let a = x.norm();
        if a == 0.0 {
            return Self::IDENTITY;
        }
        let s = a.sin() / a;
        GroupElement([a.cos(), x.0[0] * s, x.0[1] * s, x.0[2] * s])
    }

    /// Principal logarithm, `|log U| < pi`. Fails within `margin` of the cut locus.
    pub fn log(&self, group: Group, margin: f64) -> Result<Algebra, CutLocus> {
        let cut = match group {
            Group::U1 => self.u1_angle().abs() > PI - margin,
            Group::Su2 => self.0[0] <= -1.0 + margin,
        };
        if cut {
            return Err(CutLocus { element: self.0 });
        }
        Ok(self.log_unchecked())
    }

    /// Logarithm without the cut-locus guard (branch chosen by `atan2`).
    pub fn log_unchecked(&self) -> Algebra {
        let v = self.vector();
        let vn = v.norm();
        let theta = vn.atan2(self.0[0]);
        let f = if vn < 1e-8 {
            // theta / sin(theta) with q0 > 0 near the identity
            if self.0[0] > 0.0 {
                1.0 + theta * theta / 6.0
            } else {
                theta / vn.max(f64::MIN_POSITIVE)
            }
        } else {
            theta / vn
        };
        v.scale(f)
    }

    /// `g^-1 X g`.
    pub fn ad(&self, x: &Algebra) -> Algebra {
        let q = qmul(&qmul(&qconj(&self.0), &x.as_quat()), &self.0);
        Algebra([q[1], q[2], q[3]])
    }

    /// `g X g^-1`, the inverse of [`GroupElement::ad`].
    pub fn ad_inv(&self, x: &Algebra) -> Algebra {
        self.inverse().ad(x)
    }

    /// 3x3 matrix of `X -> g^-1 X g`.
    pub fn ad_matrix(&self) -> nalgebra::Matrix3<f64> {
        let mut m = nalgebra::Matrix3::zeros();
        for j in 0..3 {
            let col = self.ad(&Algebra::e(j));
            for i in 0..3 {
                m[(i, j)] = col.0[i];
            }
        }
        m
    }

    /// Right multiplication by `exp(x)`.
    pub fn right_exp(&self, x: &Algebra) -> GroupElement {
        self.mul(&GroupElement::exp(x))
    }
}

/// Right-trivialized differential of log: `d/dt log(exp(L) exp(tZ))|_{t=0}`.
pub fn dlog_right(l: &Algebra, z: &Algebra) -> Algebra {
    let c2 = dlog_c2(l.norm());
    let lz = l.cross(z);
    z.add(&lz).add(&l.cross(&lz).scale(c2))
}

/// Matrix form of [`dlog_right`].
pub fn dlog_right_matrix(l: &Algebra) -> nalgebra::Matrix3<f64> {
    let mut m = nalgebra::Matrix3::zeros();
    for j in 0..3 {
        let col = dlog_right(l, &Algebra::e(j));
        for i in 0..3 {
            m[(i, j)] = col.0[i];
        }
    }
    m
}

fn dlog_c2(a: f64) -> f64 {
    if a < 1e-4 {
        1.0 / 3.0 + a * a / 45.0
    } else {
        (1.0 - a / a.tan()) / (a * a)
    }
}

impl Group {
    pub fn dim(&self) -> usize {
        match self {
            Group::U1 => 1,
            Group::Su2 => 3,
        }
    }

    pub fn is_abelian(&self) -> bool {
        matches!(self, Group::U1)
    }

    pub fn basis(&self, k: usize) -> Algebra {
        assert!(k < self.dim());
        Algebra::e(k)
    }

    pub fn from_coefficients(&self, c: &[f64]) -> Algebra {
        let mut v = [0.0; 3];
        v[..self.dim()].copy_from_slice(&c[..self.dim()]);
        Algebra(v)
    }

    pub fn coefficients(&self, x: &Algebra) -> Vec<f64> {
        x.0[..self.dim()].to_vec()
    }

    /// Number of quaternion components a group element of this kind occupies.
    pub fn components(&self) -> usize {
        self.dim() + 1
    }

    pub fn haar<R: Rng + ?Sized>(&self, rng: &mut R) -> GroupElement {
        match self {
            Group::U1 => {
                let t: f64 = rng.random_range(-PI..PI);
                GroupElement([t.cos(), t.sin(), 0.0, 0.0])
            }
            Group::Su2 => {
                let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
                GroupElement(q).renormalized()
            }
        }
    }

    /// Normally distributed algebra element with per-component std `scale`.
    pub fn random_algebra<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Algebra {
        let mut v = [0.0; 3];
        for x in v.iter_mut().take(self.dim()) {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
        Algebra(v)
    }

    /// Projects an arbitrary algebra vector onto this group's algebra.
    pub fn project(&self, x: &Algebra) -> Algebra {
        match self {
            Group::U1 => Algebra([x.0[0], 0.0, 0.0]),
            Group::Su2 => *x,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn exp_examples() {
        assert_eq!(GroupElement::exp(&Algebra::ZERO), GroupElement::IDENTITY);
        let q = GroupElement::exp(&Algebra::e(0).scale(FRAC_PI_2));
        assert!(close(&q.0, &[0.0, 1.0, 0.0, 0.0], 1e-15));
        let u = GroupElement::exp(&Algebra([3.0 * PI, 0.0, 0.0]));
        assert!((u.u1_angle() - PI).abs() < 1e-12);
    }

    #[test]
    fn log_examples() {
        let l = GroupElement::IDENTITY.log(Group::Su2, DEFAULT_CUT_MARGIN).unwrap();
        assert_eq!(l, Algebra::ZERO);
        let l = GroupElement([0.0, 1.0, 0.0, 0.0]).log(Group::Su2, DEFAULT_CUT_MARGIN).unwrap();
        assert!(close(&l.0, &[FRAC_PI_2, 0.0, 0.0], 1e-15));
        assert!(GroupElement([-1.0, 0.0, 0.0, 0.0]).log(Group::Su2, DEFAULT_CUT_MARGIN).is_err());
        assert!(GroupElement([-1.0, 0.0, 0.0, 0.0]).log(Group::U1, DEFAULT_CUT_MARGIN).is_err());
    }

    #[test]
    fn ad_examples() {
        let x = Algebra([0.3, -0.2, 0.5]);
        assert_eq!(GroupElement::IDENTITY.ad(&x), x);
        let g = GroupElement([0.0, 1.0, 0.0, 0.0]);
        assert!(close(&g.ad(&Algebra::e(1)).0, &[0.0, -1.0, 0.0], 1e-15));
        let u = GroupElement::exp(&Algebra([0.7, 0.0, 0.0]));
        assert!(close(&u.ad(&Algebra([0.4, 0.0, 0.0])).0, &[0.4, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn bracket_examples() {
        let x = Algebra([0.1, 0.2, 0.3]);
        assert_eq!(bracket(&x, &x), Algebra::ZERO);
        assert_eq!(bracket(&Algebra::e(0), &Algebra::e(1)), Algebra([0.0, 0.0, 2.0]));
        let xy = qmul(&Algebra::e(0).as_quat(), &Algebra::e(1).as_quat());
        let yx = qmul(&Algebra::e(1).as_quat(), &Algebra::e(0).as_quat());
        assert!(close(&[xy[3] - yx[3]], &[2.0], 1e-15));
    }

    #[test]
    fn jacobi_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let [x, y, z] = std::array::from_fn(|_| Group::Su2.random_algebra(&mut rng, 1.0));
            let j = bracket(&x, &bracket(&y, &z))
                .add(&bracket(&y, &bracket(&z, &x)))
                .add(&bracket(&z, &bracket(&x, &y)));
            assert!(j.norm() < 1e-12);
        }
    }

    #[test]
    fn ad_preserves_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let g = Group::Su2.haar(&mut rng);
            let x = Group::Su2.random_algebra(&mut rng, 1.0);
            let y = Group::Su2.random_algebra(&mut rng, 1.0);
            assert!((inner(&g.ad(&x), &g.ad(&y)) - inner(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for group in [Group::U1, Group::Su2] {
            let mut checked = 0;
            for _ in 0..10_000 {
                let u = group.haar(&mut rng);
                if let Ok(l) = u.log(group, 1e-3) {
                    let back = GroupElement::exp(&l);
                    assert!(close(&back.0, &u.0, 1e-10), "{u:?} {back:?}");
                    assert!(l.norm() < PI);
                    checked += 1;
                }
            }
            assert!(checked > 9_900);
        }
    }

    #[test]
    fn long_products_stay_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = GroupElement::IDENTITY;
        let steps: Vec<GroupElement> = (0..64).map(|_| Group::Su2.haar(&mut rng)).collect();
        for i in 0..100_000 {
            g = g.mul(&steps[i % steps.len()]);
        }
        assert!(g.modulus_error() < 1e-12);
    }

    #[test]
    fn dlog_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..200 {
            let l = Group::Su2.random_algebra(&mut rng, 0.8);
            let z = Group::Su2.random_algebra(&mut rng, 1.0);
            let u = GroupElement::exp(&l);
            let plus = u.right_exp(&z.scale(h)).log_unchecked();
            let minus = u.right_exp(&z.scale(-h)).log_unchecked();
            let fd = plus.sub(&minus).scale(0.5 / h);
            let an = dlog_right(&l, &z);
            assert!(fd.sub(&an).norm() < 1e-7 * (1.0 + an.norm()), "{fd:?} {an:?}");
        }
    }

    #[test]
    fn directional_derivative_of_class_function() {
        // d/dt Re tr(g exp(tX)) = -2 vec(g) . X
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for _ in 0..100 {
            let g = Group::Su2.haar(&mut rng);
            let x = Group::Su2.random_algebra(&mut rng, 1.0);
            let fd = (g.right_exp(&x.scale(h)).re_tr() - g.right_exp(&x.scale(-h)).re_tr()) / (2.0 * h);
            let an = -2.0 * g.vector().dot(&x);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3));
        }
    }
}
