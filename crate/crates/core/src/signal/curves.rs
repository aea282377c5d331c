use crate::error::{Error, Result};
use crate::volume::Grid;

/// Supported acquisition lengths.
pub const MIN_TIMEPOINTS: usize = 45;
pub const MAX_TIMEPOINTS: usize = 60;

/// Standard deviation below which a curve is treated as constant.
pub const ZSCORE_EPS: f64 = 1e-8;

pub fn check_timepoints(t: usize) -> Result<()> {
    if (MIN_TIMEPOINTS..=MAX_TIMEPOINTS).contains(&t) {
        Ok(())
    } else {
        Err(Error::param(format!(
            "acquisition length {t} outside [{MIN_TIMEPOINTS}, {MAX_TIMEPOINTS}]"
        )))
    }
}

/// One voxel's temporal signal.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeIntensityCurve {
    values: Vec<f64>,
}

impl TimeIntensityCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("curve contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Result of temporal z-scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScored {
    pub curve: TimeIntensityCurve,
    /// Set for constant input; `curve` is then all zeros.
    pub degenerate: bool,
}

/// Temporal z-score with the sample (n−1) standard deviation.
pub fn zscore(curve: &TimeIntensityCurve) -> Result<ZScored> {
    let x = curve.values();
    if x.len() < 2 {
        return Err(Error::param("z-score needs at least 2 timepoints"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd < ZSCORE_EPS {
        return Ok(ZScored {
            curve: TimeIntensityCurve { values: vec![0.0; x.len()] },
            degenerate: true,
        });
    }
    Ok(ZScored {
        curve: TimeIntensityCurve {
            values: x.iter().map(|v| (v - mean) / sd).collect(),
        },
        degenerate: false,
    })
}

/// 4-D perfusion signal with its tumour mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PerfusionVolume {
    grid: Grid,
    timepoints: usize,
    /// C order `[x][y][z][t]`.
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl PerfusionVolume {
    pub fn new(grid: Grid, timepoints: usize, data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() * timepoints {
            return Err(Error::param("perfusion data length does not match grid × T"));
        }
        if mask.len() != grid.len() {
            return Err(Error::param("mask shape does not match perfusion grid"));
        }
        if timepoints < 2 {
            return Err(Error::param("perfusion needs at least 2 timepoints"));
        }
        Ok(Self {
            grid,
            timepoints,
            data,
            mask,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn timepoints(&self) -> usize {
        self.timepoints
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn curve_at(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * self.timepoints..(voxel + 1) * self.timepoints]
    }

    pub fn masked_voxels(&self) -> Vec<usize> {
        (0..self.grid.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// One curve per masked voxel, in lexicographic voxel order.
pub fn extract_curves(vol: &PerfusionVolume) -> Result<Vec<(usize, TimeIntensityCurve)>> {
    let voxels = vol.masked_voxels();
    if voxels.is_empty() {
        return Err(Error::Domain("tumour mask is empty".into()));
    }
    voxels
        .into_iter()
        .map(|v| Ok((v, TimeIntensityCurve::new(vol.curve_at(v).to_vec())?)))
        .collect()
}
