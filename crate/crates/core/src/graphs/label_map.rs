//! Composite code volume: each masked voxel carries `Σ_n codes[n]·K^n`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::volume::Grid;

pub const UNMASKED: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    k: usize,
    n: usize,
    labels: Vec<i64>,
}

/// Base-`k` positional encoding of a code sequence, first position least significant.
pub fn composite_code(codes: &[usize], k: usize) -> i64 {
    codes.iter().rev().fold(0i64, |acc, &c| acc * k as i64 + c as i64)
}

/// Inverse of [`composite_code`].
pub fn split_code(mut code: i64, k: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let c = (code % k as i64) as usize;
            code /= k as i64;
            c
        })
        .collect()
}

impl LabelMap {
    /// Validates that masked labels lie in `[0, k^n)` and the rest are −1.
    pub fn new(grid: Grid, k: usize, n: usize, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Consistency("label map size differs from grid".into()));
        }
        let range = (k as i64).pow(n as u32);
        if let Some(bad) = labels.iter().find(|&&l| l != UNMASKED && !(0..range).contains(&l)) {
            return Err(Error::Consistency(format!(
                "label {bad} outside composite range [0, {range}) for K={k}, N={n}"
            )));
        }
        Ok(Self { grid, k, n, labels })
    }

    /// Label map from per-voxel code sequences of the masked voxels.
    pub fn from_codes(grid: Grid, k: usize, n: usize, voxels: &[usize], codes: &[Vec<usize>]) -> Result<Self> {
        if voxels.len() != codes.len() {
            return Err(Error::Consistency("one code sequence per voxel required".into()));
        }
        let mut labels = vec![UNMASKED; grid.len()];
        for (&v, c) in voxels.iter().zip(codes) {
            if c.len() != n || c.iter().any(|&x| x >= k) {
                return Err(Error::Consistency(format!(
                    "code sequence {c:?} incompatible with K={k}, N={n}"
                )));
            }
            labels[v] = composite_code(c, k);
        }
        Self::new(grid, k, n, labels)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn get(&self, voxel: usize) -> i64 {
        self.labels[voxel]
    }

    pub fn is_masked(&self, voxel: usize) -> bool {
        self.labels[voxel] != UNMASKED
    }

    pub fn masked_voxels(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&v| self.is_masked(v)).collect()
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(i64, i64), usize> = HashMap::new();
    let mut ra: HashMap<i64, usize> = HashMap::new();
    let mut rb: HashMap<i64, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n).max(1.0);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_examples() {
        assert_eq!(composite_code(&[1, 0, 1], 2), 5);
        assert_eq!(composite_code(&[0, 0, 0], 2), 0);
        assert_eq!(composite_code(&[1, 1, 1], 2), 7);
        assert_eq!(composite_code(&[2, 1], 3), 5);
        for c in 0..27 {
            assert_eq!(composite_code(&split_code(c, 3, 3), 3), c);
        }
    }

    #[test]
    fn range_is_checked() {
        let g = Grid::new(1, 1, 3);
        assert!(LabelMap::new(g, 2, 3, vec![-1, 0, 7]).is_ok());
        assert!(matches!(LabelMap::new(g, 2, 3, vec![-1, 0, 8]), Err(Error::Consistency(_))));
        assert!(LabelMap::new(g, 2, 3, vec![-2, 0, 1]).is_err());
        assert!(LabelMap::from_codes(g, 2, 2, &[0], &[vec![0, 0, 1]]).is_err());
    }

    #[test]
    fn ari_examples() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 9, 9]) - 1.0).abs() < 1e-12);
        // Classic example: ARI = 0.24242...
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 2, 2];
        assert!((adjusted_rand_index(&a, &b) - 0.242_424_242_424).abs() < 1e-9);
    }
}
