//! Lattice indexing on `Z^b x Z^d`, truncation boxes and weighted norms.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FourierSeq;

/// Default cap on the number of points a box may enumerate.
pub const DEFAULT_BOX_CAP: u128 = 10_000_000;

/// One Fourier mode `(n, j)` of the space-time torus: `n` indexes the
/// tangential frequencies, `j` the spatial wave vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeIndex {
    pub n: Vec<i64>,
    pub j: Vec<i64>,
}

impl ModeIndex {
    pub fn new(n: Vec<i64>, j: Vec<i64>) -> Self {
        Self { n, j }
    }

    pub fn zero(b: usize, d: usize) -> Self {
        Self {
            n: vec![0; b],
            j: vec![0; d],
        }
    }

    /// The tangential site `(-e_k, j)`.
    pub fn tangential(b: usize, k: usize, j: &[i64]) -> Self {
        let mut n = vec![0; b];
        n[k] = -1;
        Self { n, j: j.to_vec() }
    }

    pub fn b(&self) -> usize {
        self.n.len()
    }

    pub fn d(&self) -> usize {
        self.j.len()
    }

    pub fn is_zero(&self) -> bool {
        self.n.iter().all(|&x| x == 0) && self.j.iter().all(|&x| x == 0)
    }

    /// `|j|^2` as an exact integer.
    pub fn j_sq(&self) -> i64 {
        self.j.iter().map(|x| x * x).sum()
    }

    /// `n . w` for an integer frequency vector.
    pub fn n_dot_int(&self, w: &[i64]) -> i64 {
        self.n.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    pub fn n_dot(&self, w: &[f64]) -> f64 {
        self.n.iter().zip(w).map(|(&a, b)| a as f64 * b).sum()
    }

    /// Euclidean norm of the concatenated `(n, j)` vector.
    pub fn norm(&self) -> f64 {
        let s: i64 = self.n.iter().chain(&self.j).map(|x| x * x).sum();
        (s as f64).sqrt()
    }

    pub fn n_sup(&self) -> i64 {
        self.n.iter().map(|x| x.abs()).max().unwrap_or(0)
    }

    pub fn j_sup(&self) -> i64 {
        self.j.iter().map(|x| x.abs()).max().unwrap_or(0)
    }

    pub fn scale_j(&self, k: i64) -> Self {
        Self {
            n: self.n.clone(),
            j: self.j.iter().map(|x| x * k).collect(),
        }
    }
}

impl Add for &ModeIndex {
    type Output = ModeIndex;
    fn add(self, rhs: &ModeIndex) -> ModeIndex {
        ModeIndex {
            n: self.n.iter().zip(&rhs.n).map(|(a, b)| a + b).collect(),
            j: self.j.iter().zip(&rhs.j).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ModeIndex {
    type Output = ModeIndex;
    fn sub(self, rhs: &ModeIndex) -> ModeIndex {
        ModeIndex {
            n: self.n.iter().zip(&rhs.n).map(|(a, b)| a - b).collect(),
            j: self.j.iter().zip(&rhs.j).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Neg for &ModeIndex {
    type Output = ModeIndex;
    fn neg(self) -> ModeIndex {
        ModeIndex {
            n: self.n.iter().map(|a| -a).collect(),
            j: self.j.iter().map(|a| -a).collect(),
        }
    }
}

impl fmt::Display for ModeIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[i64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        write!(f, "[{}|{}]", join(&self.n), join(&self.j))
    }
}

/// An anisotropic truncation box `|n|_inf <= n_radius`, `|j|_inf <= j_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncBox {
    pub n_radius: i64,
    pub j_radius: i64,
}

impl TruncBox {
    pub fn new(n_radius: i64, j_radius: i64) -> Self {
        Self { n_radius, j_radius }
    }

    pub fn isotropic(radius: i64) -> Self {
        Self::new(radius, radius)
    }

    /// A box large enough to never exclude anything.
    pub fn unbounded() -> Self {
        Self::new(i64::MAX / 4, i64::MAX / 4)
    }

    pub fn contains(&self, x: &ModeIndex) -> bool {
        x.n_sup() <= self.n_radius && x.j_sup() <= self.j_radius
    }

    pub fn cardinality(&self, b: usize, d: usize) -> u128 {
        let side_n = (2 * self.n_radius + 1) as u128;
        let side_j = (2 * self.j_radius + 1) as u128;
        side_n.saturating_pow(b as u32).saturating_mul(side_j.saturating_pow(d as u32))
    }
}

/// Lists every lattice point of `bx` in lexicographic `(n, j)` order.
///
/// The position of a point in the returned list is the canonical matrix
/// index used by the operator assembly.
pub fn box_enumerate(bx: &TruncBox, b: usize, d: usize) -> Result<Vec<ModeIndex>> {
    box_enumerate_capped(bx, b, d, DEFAULT_BOX_CAP)
}

pub fn box_enumerate_capped(bx: &TruncBox, b: usize, d: usize, cap: u128) -> Result<Vec<ModeIndex>> {
    if b == 0 || d == 0 {
        return Err(Error::InvalidArgument("b and d must be at least 1".into()));
    }
    if bx.n_radius < 0 || bx.j_radius < 0 {
        return Err(Error::InvalidArgument("box radii must be non-negative".into()));
    }
    let count = bx.cardinality(b, d);
    if count > cap {
        return Err(Error::Capacity {
            what: "box enumeration",
            needed: count,
            limit: cap,
        });
    }
    let radii: Vec<i64> = std::iter::repeat_n(bx.n_radius, b)
        .chain(std::iter::repeat_n(bx.j_radius, d))
        .collect();
    let mut cur: Vec<i64> = radii.iter().map(|r| -r).collect();
    let mut out = Vec::with_capacity(count as usize);
    loop {
        out.push(ModeIndex::new(cur[..b].to_vec(), cur[b..].to_vec()));
        // odometer, last coordinate fastest
        let mut pos = cur.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            if cur[pos] < radii[pos] {
                cur[pos] += 1;
                for (c, r) in cur[pos + 1..].iter_mut().zip(&radii[pos + 1..]) {
                    *c = -r;
                }
                break;
            }
        }
    }
}

/// Exponential weight `rho(x) = exp(beta |x|)` outside the ball `|x| <= x0`, one inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub beta: f64,
    pub x0: f64,
}

impl Default for Weight {
    fn default() -> Self {
        Self { beta: 0.25, x0: 10.0 }
    }
}

impl Weight {
    pub fn new(beta: f64, x0: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!("weight beta must lie in (0,1), got {beta}")));
        }
        if !(x0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight x0 must be >= 0, got {x0}")));
        }
        Ok(Self { beta, x0 })
    }

    pub fn at_radius(&self, r: f64) -> f64 {
        if r > self.x0 {
            (self.beta * r).exp()
        } else {
            1.0
        }
    }
}

pub fn weight_value(x: &ModeIndex, w: &Weight) -> f64 {
    w.at_radius(x.norm())
}

/// `sqrt(sum rho(x)^2 |f(x)|^2)`.
pub fn weighted_norm(f: &FourierSeq, w: &Weight) -> f64 {
    f.iter()
        .map(|(x, c)| {
            let r = weight_value(x, w);
            r * r * c.norm_sqr()
        })
        .fold(0.0, |s, x| s + x)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn zero_box_has_origin_only() {
        let pts = box_enumerate(&TruncBox::new(0, 0), 1, 1).unwrap();
        assert_eq!(pts, vec![ModeIndex::new(vec![0], vec![0])]);
    }

    #[test]
    fn three_by_three_order() {
        let pts = box_enumerate(&TruncBox::new(1, 1), 1, 1).unwrap();
        assert_eq!(pts.len(), 9);
        assert_eq!(pts[0], ModeIndex::new(vec![-1], vec![-1]));
        assert_eq!(pts[8], ModeIndex::new(vec![1], vec![1]));
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cardinality_matches_enumeration() {
        let bx = TruncBox::new(2, 3);
        let pts = box_enumerate(&bx, 2, 2).unwrap();
        // (2*2+1)^2 * (2*3+1)^2
        assert_eq!(pts.len(), 25 * 49);
        assert_eq!(bx.cardinality(2, 2), 1225);
        let set: std::collections::BTreeSet<_> = pts.iter().cloned().collect();
        assert_eq!(set.len(), pts.len());
        assert!(pts.iter().all(|p| bx.contains(p)));
    }

    #[test]
    fn capacity_error() {
        let err = box_enumerate_capped(&TruncBox::new(5, 5), 2, 2, 100).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn weight_branches() {
        let w = Weight::new(0.5, 5.0).unwrap();
        assert_eq!(weight_value(&ModeIndex::zero(1, 1), &w), 1.0);
        let x = ModeIndex::new(vec![6], vec![8]); // |x| = 10
        assert!((weight_value(&x, &w) - 5f64.exp()).abs() < 1e-12);
        assert!((weight_value(&x, &w) - 148.413159102576).abs() < 1e-9);
        let edge = ModeIndex::new(vec![3], vec![4]); // |x| = 5 = x0
        assert_eq!(weight_value(&edge, &w), 1.0);
        assert!(Weight::new(1.0, 1.0).is_err());
    }

    #[test]
    fn weighted_norm_examples() {
        let w = Weight::new(0.5, 5.0).unwrap();
        assert_eq!(weighted_norm(&FourierSeq::zero(1, 1), &w), 0.0);
        let c = Complex64::new(0.3, -0.4);
        let f = FourierSeq::from_pairs(1, 1, [(ModeIndex::zero(1, 1), c)]);
        assert!((weighted_norm(&f, &w) - 0.5).abs() < 1e-15);
        let g = FourierSeq::from_pairs(
            1,
            1,
            [
                (ModeIndex::zero(1, 1), Complex64::new(1.0, 0.0)),
                (ModeIndex::new(vec![6], vec![8]), Complex64::new(1.0, 0.0)),
            ],
        );
        let want = (1.0 + 10f64.exp()).sqrt();
        assert!((weighted_norm(&g, &w) - want).abs() < 1e-12 * want);
    }
}
