//! Hierarchical structure on the countable index set: nested cluster
//! partitions, mixed-radix enumeration and the Abelian group of shifts.
//!
//! Points are identified with their enumeration index `k` via the
//! mixed-radix expansion `k = sum_r digit_r * |Q_{r-1}|`, where `|Q_r|`
//! is the volume of a rank-`r` cluster. Rank-`r` clusters are the
//! contiguous index blocks of length `|Q_r|`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Nested partition structure: branching factors `n_r >= 2` for ranks
/// `1..=max_rank` and the derived cluster volumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchicalStructure {
    factors: Vec<u32>,
    volumes: Vec<u64>,
    homogeneous_degree: Option<u32>,
}

impl HierarchicalStructure {
    /// Homogeneous structure of degree `n`: every branching factor equals `n`.
    pub fn homogeneous(n: u32, max_rank: usize) -> Result<Self> {
        Self::from_factors(vec![n; max_rank], Some(n))
    }

    /// Explicit finite prefix of branching factors, extended by a
    /// homogeneous degree `extension` up to `max_rank`.
    pub fn explicit(prefix: &[u32], extension: u32, max_rank: usize) -> Result<Self> {
        if prefix.len() > max_rank {
            return Err(Error::Validation(format!(
                "branching prefix length {} exceeds max_rank {}",
                prefix.len(),
                max_rank
            )));
        }
        let mut factors = prefix.to_vec();
        factors.resize(max_rank, extension);
        let homogeneous = if prefix.iter().all(|&n| n == extension) {
            Some(extension)
        } else {
            None
        };
        Self::from_factors(factors, homogeneous)
    }

    fn from_factors(factors: Vec<u32>, homogeneous_degree: Option<u32>) -> Result<Self> {
        let mut volumes = Vec::with_capacity(factors.len() + 1);
        volumes.push(1u64);
        for (i, &n) in factors.iter().enumerate() {
            if n < 2 {
                return Err(Error::Validation(format!(
                    "branching factor n_{} = {} must be >= 2",
                    i + 1,
                    n
                )));
            }
            let prev = *volumes.last().unwrap();
            let vol = prev.checked_mul(n as u64).ok_or_else(|| {
                Error::Validation("cluster volume overflows u64".to_string())
            })?;
            volumes.push(vol);
        }
        Ok(Self {
            factors,
            volumes,
            homogeneous_degree,
        })
    }

    pub fn max_rank(&self) -> usize {
        self.factors.len()
    }

    /// Branching factor `n_r` for `1 <= r <= max_rank`.
    pub fn factor(&self, r: usize) -> u32 {
        self.factors[r - 1]
    }

    /// Cluster volume `|Q_r|`; `volume(0) = 1`.
    pub fn volume(&self, r: usize) -> u64 {
        self.volumes[r]
    }

    /// Degree `n` if the structure is homogeneous.
    pub fn homogeneous_degree(&self) -> Option<u32> {
        self.homogeneous_degree
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        if r > self.max_rank() {
            return Err(Error::Range(format!(
                "rank {} exceeds max_rank {}",
                r,
                self.max_rank()
            )));
        }
        Ok(())
    }

    fn check_index(&self, k: u64) -> Result<()> {
        if k >= self.volume(self.max_rank()) {
            return Err(Error::Range(format!(
                "index {} outside materialized volume {}",
                k,
                self.volume(self.max_rank())
            )));
        }
        Ok(())
    }

    /// Mixed-radix expansion of the enumeration index `k`.
    pub fn index_to_point(&self, k: u64) -> Result<Point> {
        self.check_index(k)?;
        let mut digits = Vec::new();
        let mut rest = k;
        for &n in &self.factors {
            digits.push((rest % n as u64) as u32);
            rest /= n as u64;
        }
        Ok(Point::trimmed(digits))
    }

    /// Enumeration index of a point; inverse of [`index_to_point`].
    ///
    /// [`index_to_point`]: HierarchicalStructure::index_to_point
    pub fn point_to_index(&self, p: &Point) -> Result<u64> {
        self.validate_point(p)?;
        let mut k = 0u64;
        for (i, &d) in p.digits.iter().enumerate() {
            k += d as u64 * self.volume(i);
        }
        Ok(k)
    }

    pub fn validate_point(&self, p: &Point) -> Result<()> {
        if p.digits.len() > self.max_rank() {
            return Err(Error::Range(format!(
                "point has {} digits, max_rank is {}",
                p.digits.len(),
                self.max_rank()
            )));
        }
        for (i, &d) in p.digits.iter().enumerate() {
            let n = self.factor(i + 1);
            if d >= n {
                return Err(Error::Validation(format!(
                    "digit {} at rank {} out of bounds (n_{} = {})",
                    d,
                    i + 1,
                    i + 1,
                    n
                )));
            }
        }
        Ok(())
    }

    /// The unique rank-`r` cluster containing index `k`.
    pub fn cluster_of(&self, k: u64, r: usize) -> Result<ClusterRef> {
        self.check_rank(r)?;
        self.check_index(k)?;
        Ok(ClusterRef {
            rank: r,
            position: k / self.volume(r),
        })
    }

    /// Digit-wise addition modulo the branching factors.
    pub fn group_add(&self, p: &Point, q: &Point) -> Result<Point> {
        self.validate_point(p)?;
        self.validate_point(q)?;
        let len = p.digits.len().max(q.digits.len());
        let mut digits = Vec::with_capacity(len);
        for i in 0..len {
            let n = self.factor(i + 1);
            let a = p.digit(i + 1);
            let b = q.digit(i + 1);
            digits.push((a + b) % n);
        }
        Ok(Point::trimmed(digits))
    }

    /// Group inverse: digit-wise `(n_r - digit) mod n_r`.
    pub fn group_neg(&self, p: &Point) -> Result<Point> {
        self.validate_point(p)?;
        let mut digits = Vec::with_capacity(p.digits.len());
        for (i, &d) in p.digits.iter().enumerate() {
            let n = self.factor(i + 1);
            digits.push((n - d) % n);
        }
        Ok(Point::trimmed(digits))
    }

    /// Smallest rank of a common cluster of two indices.
    pub fn common_rank(&self, x: u64, y: u64) -> usize {
        let mut r = 0;
        while x / self.volume(r) != y / self.volume(r) {
            r += 1;
        }
        r
    }
}

/// Element of the index set, represented by its mixed-radix digit sequence
/// with trailing zeros implicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Point {
    digits: Vec<u32>,
}

impl Point {
    pub fn new(digits: Vec<u32>) -> Self {
        Self::trimmed(digits)
    }

    /// The group identity (all-zero digit sequence).
    pub fn origin() -> Self {
        Self { digits: Vec::new() }
    }

    fn trimmed(mut digits: Vec<u32>) -> Self {
        while digits.last() == Some(&0) {
            digits.pop();
        }
        Self { digits }
    }

    /// Digit at rank `r >= 1`; zero beyond the stored prefix.
    pub fn digit(&self, r: usize) -> u32 {
        self.digits.get(r - 1).copied().unwrap_or(0)
    }

    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    pub fn is_origin(&self) -> bool {
        self.digits.is_empty()
    }
}

/// A rank-`r` cluster identified by its position counted from the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterRef {
    pub rank: usize,
    pub position: u64,
}

impl ClusterRef {
    /// Member indices: the contiguous block of length `|Q_r|`.
    pub fn members(&self, structure: &HierarchicalStructure) -> std::ops::Range<u64> {
        let vol = structure.volume(self.rank);
        self.position * vol..(self.position + 1) * vol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1_structure() -> HierarchicalStructure {
        // branching (3, 2, 2)
        HierarchicalStructure::explicit(&[3, 2, 2], 2, 3).unwrap()
    }

    #[test]
    fn rejects_degenerate_branching() {
        assert!(HierarchicalStructure::homogeneous(1, 3).is_err());
        assert!(HierarchicalStructure::explicit(&[2, 1], 2, 3).is_err());
    }

    #[test]
    fn volumes_are_products() {
        let s = fig1_structure();
        assert_eq!(s.volume(0), 1);
        assert_eq!(s.volume(1), 3);
        assert_eq!(s.volume(2), 6);
        assert_eq!(s.volume(3), 12);
        let h = HierarchicalStructure::homogeneous(2, 10).unwrap();
        for r in 0..=10 {
            assert_eq!(h.volume(r), 1 << r);
        }
    }

    #[test]
    fn index_five_has_digits_two_one() {
        // x_5 = (2,1,0,...) for branching (3,2,2)
        let s = fig1_structure();
        let p = s.index_to_point(5).unwrap();
        assert_eq!(p.digits(), &[2, 1]);
        assert_eq!(s.point_to_index(&p).unwrap(), 5);
    }

    #[test]
    fn index_zero_is_origin() {
        let s = fig1_structure();
        assert!(s.index_to_point(0).unwrap().is_origin());
        assert_eq!(s.point_to_index(&Point::origin()).unwrap(), 0);
    }

    #[test]
    fn homogeneous_expansion() {
        // 6 = 0*1 + 1*2 + 1*4 at n = 2
        let s = HierarchicalStructure::homogeneous(2, 4).unwrap();
        let p = s.index_to_point(6).unwrap();
        assert_eq!(p.digits(), &[0, 1, 1]);
        assert_eq!(s.point_to_index(&p).unwrap(), 6);
    }

    #[test]
    fn point_to_index_ternary() {
        let s = HierarchicalStructure::homogeneous(3, 4).unwrap();
        assert_eq!(s.point_to_index(&Point::new(vec![1, 1])).unwrap(), 4);
    }

    #[test]
    fn index_out_of_range() {
        let s = fig1_structure();
        assert!(matches!(s.index_to_point(12), Err(Error::Range(_))));
    }

    #[test]
    fn digit_out_of_bounds() {
        let s = fig1_structure();
        assert!(matches!(
            s.point_to_index(&Point::new(vec![3])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cluster_positions() {
        let h = HierarchicalStructure::homogeneous(2, 4).unwrap();
        let c = h.cluster_of(5, 2).unwrap();
        assert_eq!(c.position, 1);
        assert_eq!(c.members(&h), 4..8);

        let s = fig1_structure();
        let c = s.cluster_of(7, 1).unwrap();
        assert_eq!(c.position, 2);
        assert_eq!(c.members(&s), 6..9);

        // rank 0 is the trivial partition into singletons
        let c = s.cluster_of(7, 0).unwrap();
        assert_eq!(c.members(&s), 7..8);
    }

    #[test]
    fn group_identity_and_inverse() {
        let s = fig1_structure();
        for k in 0..12 {
            let p = s.index_to_point(k).unwrap();
            let sum = s.group_add(&p, &Point::origin()).unwrap();
            assert_eq!(sum, p);
            let neg = s.group_neg(&p).unwrap();
            assert!(s.group_add(&p, &neg).unwrap().is_origin());
        }
    }

    #[test]
    fn group_add_mixed_radix() {
        // (2,1) + (2,0) = (1,1) for branching (3,2)
        let s = HierarchicalStructure::explicit(&[3, 2], 2, 2).unwrap();
        let sum = s
            .group_add(&Point::new(vec![2, 1]), &Point::new(vec![2, 0]))
            .unwrap();
        assert_eq!(sum.digits(), &[1, 1]);
    }

    #[test]
    fn partition_and_nesting() {
        let s = fig1_structure();
        let total = s.volume(s.max_rank());
        for r in 0..=s.max_rank() {
            let mut covered = vec![false; total as usize];
            let blocks = total / s.volume(r);
            for m in 0..blocks {
                let c = ClusterRef { rank: r, position: m };
                for k in c.members(&s) {
                    assert!(!covered[k as usize], "overlap at rank {r}");
                    covered[k as usize] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "gap at rank {r}");
        }
        // nesting: each rank-r cluster splits into exactly n_r children
        for r in 1..=s.max_rank() {
            assert_eq!(s.volume(r) / s.volume(r - 1), s.factor(r) as u64);
        }
    }

    #[test]
    fn cluster_translation_identity() {
        // Q_s(x + y) = x + Q_s(y), exhaustively at small volume
        let s = fig1_structure();
        let total = s.volume(s.max_rank());
        for xi in 0..total {
            let x = s.index_to_point(xi).unwrap();
            for yi in 0..total {
                let y = s.index_to_point(yi).unwrap();
                let xy = s.point_to_index(&s.group_add(&x, &y).unwrap()).unwrap();
                for rank in 0..=s.max_rank() {
                    let lhs: Vec<u64> = s
                        .cluster_of(xy, rank)
                        .unwrap()
                        .members(&s)
                        .collect();
                    let mut rhs: Vec<u64> = s
                        .cluster_of(yi, rank)
                        .unwrap()
                        .members(&s)
                        .map(|w| {
                            let wp = s.index_to_point(w).unwrap();
                            s.point_to_index(&s.group_add(&x, &wp).unwrap()).unwrap()
                        })
                        .collect();
                    rhs.sort_unstable();
                    assert_eq!(lhs, rhs);
                }
            }
        }
    }
}
