//! Gradient saliency on coarse nodes, projected to voxels and smoothed.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::HierarchicalGraph;
use crate::model::{GraphTensors, Hgnn};
use crate::nifti::{self, Dtype};
use crate::volume::{Grid, StructuralVolume};

/// How a coarse node's enriched-input gradient row is reduced to one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceMode {
    /// Euclidean norm of the gradient.
    #[default]
    L2,
    /// Sum of absolute gradient entries.
    Abs,
    /// Absolute value of gradient · input.
    GradInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    /// Gaussian standard deviation in voxels; 0 disables smoothing.
    pub sigma: f64,
    pub mode: ImportanceMode,
    /// Class whose logit is explained; the predicted class when absent.
    pub target_class: Option<usize>,
    pub png_panels: bool,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            mode: ImportanceMode::L2,
            target_class: None,
            png_panels: true,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::param("saliency sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-coarse-node importance of `target_class`, one non-negative score per node.
pub fn node_importance(model: &Hgnn, g: &GraphTensors, target_class: usize, mode: ImportanceMode) -> Result<Vec<f64>> {
    let (grad, value) = model.enriched_gradient(g, target_class)?;
    Ok(grad
        .rows()
        .into_iter()
        .zip(value.rows())
        .map(|(gr, x)| match mode {
            ImportanceMode::L2 => gr.dot(&gr).sqrt(),
            ImportanceMode::Abs => gr.iter().map(|v| v.abs()).sum(),
            ImportanceMode::GradInput => gr.dot(&x).abs(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub grid: Grid,
    pub case_id: String,
    pub target_class: usize,
    pub sigma: f64,
    /// Projected scores before smoothing; zero outside the mask.
    pub raw: Vec<f64>,
    /// Smoothed and min-max normalized to `[0, 1]`.
    pub normalized: Vec<f64>,
}

impl SaliencyMap {
    pub fn smoothed_path(dir: &Path, case_id: &str, class: usize) -> PathBuf {
        dir.join(format!("saliency_{case_id}_{class}.nii.gz"))
    }

    pub fn raw_path(dir: &Path, case_id: &str, class: usize) -> PathBuf {
        dir.join(format!("saliency_raw_{case_id}_{class}.nii.gz"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let dims = self.grid.shape;
        let desc = format!("saliency class {} sigma {}", self.target_class, self.sigma);
        nifti::write(
            &Self::smoothed_path(dir, &self.case_id, self.target_class),
            &dims,
            &self.normalized,
            Dtype::F32,
            &desc,
        )?;
        nifti::write(
            &Self::raw_path(dir, &self.case_id, self.target_class),
            &dims,
            &self.raw,
            Dtype::F64,
            &desc,
        )
    }
}

/// Project node scores onto voxel sets, smooth, and normalize.
pub fn project_voxel_sets(scores: &[f64], sets: &[Vec<usize>], grid: Grid, mask: &[bool], sigma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma must be finite and non-negative"));
    }
    if scores.len() != sets.len() {
        return Err(Error::param(format!("{} scores for {} nodes", scores.len(), sets.len())));
    }
    if mask.len() != grid.len() {
        return Err(Error::param("mask shape does not match grid"));
    }
    if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::param(format!("node score {s} is not a finite non-negative value")));
    }
    let mut raw = vec![0.0; grid.len()];
    for (&s, voxels) in scores.iter().zip(sets) {
        for &v in voxels {
            if v >= grid.len() || !mask[v] {
                return Err(Error::Consistency(format!("node voxel {v} lies outside the mask")));
            }
            raw[v] = s;
        }
    }
    let smoothed = gaussian_smooth(&raw, grid, sigma);
    Ok((raw, min_max(&smoothed)))
}

pub fn project_and_smooth(scores: &[f64], graph: &HierarchicalGraph, mask: &[bool], sigma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let sets: Vec<Vec<usize>> = graph.coarse.nodes.iter().map(|n| n.voxels.clone()).collect();
    project_voxel_sets(scores, &sets, graph.grid, mask, sigma)
}

/// Importance, projection and smoothing for one case.
pub fn case_saliency(model: &Hgnn, graph: &HierarchicalGraph, tensors: &GraphTensors, mask: &[bool], cfg: &SaliencyConfig) -> Result<SaliencyMap> {
    cfg.validate()?;
    let class = match cfg.target_class {
        Some(c) => c,
        None => crate::train::metrics::argmax(&model.logits(tensors)?),
    };
    let scores = node_importance(model, tensors, class, cfg.mode)?;
    let (raw, normalized) = project_and_smooth(&scores, graph, mask, cfg.sigma)?;
    Ok(SaliencyMap {
        grid: graph.grid,
        case_id: graph.case_id.clone(),
        target_class: class,
        sigma: cfg.sigma,
        raw,
        normalized,
    })
}

/// Normalized 1-D Gaussian truncated at 3σ.
fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter with zero padding; identity for σ = 0.
pub fn gaussian_smooth(x: &[f64], grid: Grid, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let k = kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut cur = x.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let len = grid.shape[axis] as i64;
        for (i, out) in next.iter_mut().enumerate() {
            let c = grid.coords(i);
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let p = c[axis] as i64 + j as i64 - r;
                if p < 0 || p >= len {
                    continue;
                }
                let mut q = c;
                q[axis] = p as usize;
                acc += w * cur[grid.index(q[0], q[1], q[2])];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Rescale to `[0, 1]`; a constant map becomes all ones if positive, else zeros.
pub fn min_max(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x.is_empty() {
        return Vec::new();
    }
    if hi - lo <= 0.0 {
        return vec![if hi > 0.0 { 1.0 } else { 0.0 }; x.len()];
    }
    x.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub mean: f64,
    pub voxels: usize,
    /// Set when the region is empty; `mean` is then 0.
    pub empty: bool,
}

/// Mean of `map` over `region`.
pub fn region_saliency_summary(map: &[f64], region: &[bool]) -> Result<RegionSummary> {
    if map.len() != region.len() {
        return Err(Error::param("region mask shape does not match saliency map"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (v, _) in map.iter().zip(region).filter(|(_, r)| **r) {
        sum += v;
        n += 1;
    }
    Ok(RegionSummary {
        mean: if n == 0 { 0.0 } else { sum / n as f64 },
        voxels: n,
        empty: n == 0,
    })
}

const TILE_SCALE: u32 = 4;

fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    [(255.0 * r) as u8, (255.0 * g) as u8, (255.0 * b) as u8]
}

fn code_colour(code: i64) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    PALETTE[code.rem_euclid(PALETTE.len() as i64) as usize]
}

fn blend(a: [u8; 3], b: [u8; 3], alpha: f64) -> [u8; 3] {
    std::array::from_fn(|i| (a[i] as f64 * (1.0 - alpha) + b[i] as f64 * alpha).round() as u8)
}

/// Axial slices (columns) as three rows: structural background, code overlay,
/// saliency overlay.
pub fn write_panel(path: &Path, structural: &StructuralVolume, graph: &HierarchicalGraph, map: &SaliencyMap, channel: usize) -> Result<()> {
    let grid = graph.grid;
    let [h, w, d] = grid.shape;
    if structural.grid != grid || channel >= structural.channels {
        return Err(Error::param("structural volume does not match the graph grid"));
    }
    let masked: Vec<usize> = graph.label_map.masked_voxels();
    let (mut zlo, mut zhi) = (d, 0);
    for &v in &masked {
        let z = grid.coords(v)[2];
        zlo = zlo.min(z);
        zhi = zhi.max(z);
    }
    if masked.is_empty() {
        zlo = 0;
        zhi = d - 1;
    }
    let slices: Vec<usize> = if zhi - zlo >= 4 {
        (1..=3).map(|q| zlo + q * (zhi - zlo) / 4).collect()
    } else {
        (zlo..=zhi).collect()
    };
    let values: Vec<f64> = (0..grid.len()).map(|v| structural.voxel(v)[channel]).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let tile = |x: usize, y: usize, z: usize, row: usize| -> [u8; 3] {
        let v = grid.index(x, y, z);
        let g = (255.0 * (values[v] - lo) / span) as u8;
        let bg = [g, g, g];
        match row {
            1 if graph.label_map.is_masked(v) => blend(bg, code_colour(graph.label_map.get(v)), 0.6),
            2 if map.normalized[v] > 0.05 => blend(bg, heat(map.normalized[v]), 0.7),
            _ => bg,
        }
    };
    let s = TILE_SCALE;
    let mut img = RgbImage::new(slices.len() as u32 * w as u32 * s, 3 * h as u32 * s);
    for (col, &z) in slices.iter().enumerate() {
        for row in 0..3 {
            for x in 0..h {
                for y in 0..w {
                    let c = Rgb(tile(x, y, z, row));
                    for dx in 0..s {
                        for dy in 0..s {
                            let px = (col * w + y) as u32 * s + dy;
                            let py = (row * h + x) as u32 * s + dx;
                            img.put_pixel(px, py, c);
                        }
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}
