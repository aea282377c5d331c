//! Voxel grid indexing.
//!
//! Voxels are addressed by a C-order linear index `(x·W + y)·D + z`, which is
//! also the lexicographic `(x, y, z)` order used for curve extraction.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
}

impl Grid {
    pub fn new(h: usize, w: usize, d: usize) -> Self {
        Self { shape: [h, w, d] }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let z = i % self.shape[2];
        let r = i / self.shape[2];
        [r / self.shape[1], r % self.shape[1], z]
    }

    /// 26-connected neighbours of voxel `i` inside the grid.
    pub fn neighbors26(&self, i: usize) -> Neighbors {
        self.neighbors(i, true)
    }

    /// Face-connected (6) neighbours of voxel `i`.
    pub fn neighbors6(&self, i: usize) -> Neighbors {
        self.neighbors(i, false)
    }

    fn neighbors(&self, i: usize, full: bool) -> Neighbors {
        let c = self.coords(i);
        let mut out = Neighbors { buf: [0; 26], len: 0 };
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    if manhattan == 0 || (!full && manhattan != 1) {
                        continue;
                    }
                    let p = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.shape[a]) {
                        out.buf[out.len] = self.index(p[0] as usize, p[1] as usize, p[2] as usize);
                        out.len += 1;
                    }
                }
            }
        }
        out
    }
}

/// Fixed-capacity neighbour list.
pub struct Neighbors {
    buf: [usize; 26],
    len: usize,
}

impl Neighbors {
    pub fn as_slice(&self) -> &[usize] {
        &self.buf[..self.len]
    }
}

impl<'a> IntoIterator for &'a Neighbors {
    type Item = &'a usize;
    type IntoIter = std::slice::Iter<'a, usize>;
    fn into_iter(self) -> Self::IntoIter {
        self.as_slice().iter()
    }
}

/// Structural channels (T1, T1CE, T2, FLAIR).
pub const STRUCTURAL_CHANNELS: usize = 4;

/// Co-registered multi-channel structural image, C order `[x][y][z][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralVolume {
    pub grid: Grid,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl StructuralVolume {
    pub fn new(grid: Grid, channels: usize, data: Vec<f64>) -> crate::Result<Self> {
        if data.len() != grid.len() * channels {
            return Err(crate::Error::Parameter(
                "structural data length does not match grid × channels".into(),
            ));
        }
        Ok(Self { grid, channels, data })
    }

    pub fn voxel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// Mean voxel coordinate of a voxel set.
pub fn centroid(grid: &Grid, voxels: &[usize]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for &v in voxels {
        let c = grid.coords(v);
        for a in 0..3 {
            s[a] += c[a] as f64;
        }
    }
    let n = voxels.len().max(1) as f64;
    [s[0] / n, s[1] / n, s[2] / n]
}

/// Run-length encode a sorted voxel list as `(start, length)` pairs.
pub fn rle_encode(sorted: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &v in sorted {
        match runs.last_mut() {
            Some((s, l)) if *s + *l == v => *l += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs
}

pub fn rle_decode(runs: &[(usize, usize)]) -> Vec<usize> {
    runs.iter().flat_map(|&(s, l)| s..s + l).collect()
}
