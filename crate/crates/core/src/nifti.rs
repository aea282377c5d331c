//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Volumes are exchanged in C order (first axis slowest) and converted to the
//! on-disk NIfTI order (first axis fastest). Files are written little-endian
//! with an identity affine in both qform and sform.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> i16 {
        match self {
            Dtype::U8 => 2,
            Dtype::I16 => 4,
            Dtype::I32 => 8,
            Dtype::F32 => 16,
            Dtype::F64 => 64,
        }
    }

    fn from_code(c: i16) -> Option<Self> {
        Some(match c {
            2 => Dtype::U8,
            4 => Dtype::I16,
            8 => Dtype::I32,
            16 => Dtype::F32,
            64 => Dtype::F64,
            _ => return None,
        })
    }

    fn bytes(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A volume in C order with its dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: Dtype,
}

/// Map a Fortran-order linear index to the matching C-order index.
fn c_to_f_index(dims: &[usize]) -> impl Fn(usize) -> usize + '_ {
    let mut strides = vec![0; dims.len()];
    let mut stride = 1;
    for (i, &d) in dims.iter().enumerate().rev() {
        strides[i] = stride;
        stride *= d;
    }
    move |mut f| {
        let mut c = 0;
        for (i, &d) in dims.iter().enumerate() {
            c += (f % d) * strides[i];
            f /= d;
        }
        c
    }
}

fn header(dims: &[usize], dtype: Dtype, description: &str) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    put_i16(&mut h, 40, dims.len() as i16);
    for (i, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, d as i16);
    }
    for i in dims.len()..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, dtype.code());
    put_i16(&mut h, 72, (dtype.bytes() * 8) as i16);
    // pixdim[0] is qfac.
    for i in 0..8 {
        put_f32(&mut h, 76 + 4 * i, 1.0);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2 | 8; // mm, seconds
    let desc = description.as_bytes();
    let n = desc.len().min(79);
    h[148..148 + n].copy_from_slice(&desc[..n]);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 280, 1.0);
    put_f32(&mut h, 300, 1.0);
    put_f32(&mut h, 320, 1.0);
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Write `data` (C order, `dims` shape) as NIfTI-1; gzip when the path ends in `.gz`.
pub fn write(path: &Path, dims: &[usize], data: &[f64], dtype: Dtype, description: &str) -> Result<()> {
    if dims.is_empty() || dims.len() > 7 {
        return Err(Error::param(format!("nifti: unsupported rank {}", dims.len())));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::param("nifti: data length does not match dims"));
    }
    if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::param("nifti: dimension out of range"));
    }
    let mut bytes = header(dims, dtype, description);
    bytes.reserve(data.len() * dtype.bytes());
    let f2c = c_to_f_index(dims);
    for f in 0..data.len() {
        let x = data[f2c(f)];
        match dtype {
            Dtype::U8 => bytes.push(x.round().clamp(0.0, 255.0) as u8),
            Dtype::I16 => bytes.extend_from_slice(&(x.round() as i16).to_le_bytes()),
            Dtype::I32 => bytes.extend_from_slice(&(x.round() as i32).to_le_bytes()),
            Dtype::F32 => bytes.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Volume> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    let bad = |r: &str| Error::format(path, r.to_string());
    if bytes.len() < HEADER_SIZE {
        return Err(bad("shorter than a NIfTI-1 header"));
    }
    let i16_at = |off: usize| i16::from_le_bytes([bytes[off], bytes[off + 1]]);
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    if i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) != HEADER_SIZE as i32 {
        return Err(bad("unsupported byte order or header size"));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(bad("missing n+1 magic"));
    }
    let rank = i16_at(40);
    if !(1..=7).contains(&rank) {
        return Err(bad("invalid rank"));
    }
    let dims: Vec<usize> = (0..rank as usize).map(|i| i16_at(42 + 2 * i).max(0) as usize).collect();
    let dtype = Dtype::from_code(i16_at(70)).ok_or_else(|| bad("unsupported datatype"))?;
    let offset = f32_at(108) as usize;
    let slope = match f32_at(112) {
        s if s == 0.0 || !s.is_finite() => 1.0,
        s => s as f64,
    };
    let inter = f32_at(116) as f64;
    let n: usize = dims.iter().product();
    let need = offset + n * dtype.bytes();
    if bytes.len() < need {
        return Err(bad("truncated voxel data"));
    }
    let body = &bytes[offset..need];
    let mut data = vec![0.0; n];
    let f2c = c_to_f_index(&dims);
    let w = dtype.bytes();
    for f in 0..n {
        let b = &body[f * w..(f + 1) * w];
        let x = match dtype {
            Dtype::U8 => b[0] as f64,
            Dtype::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Dtype::I32 => i32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            Dtype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        };
        data[f2c(f)] = x * slope + inter;
    }
    drop(f2c);
    Ok(Volume { dims, data, dtype })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_4d_gz_preserves_c_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii.gz");
        let dims = [2, 3, 4, 5];
        let data: Vec<f64> = (0..120).map(|i| i as f64 * 0.5).collect();
        write(&p, &dims, &data, Dtype::F32, "test").unwrap();
        let v = read(&p).unwrap();
        assert_eq!(v.dims, dims);
        assert_eq!(v.data, data);
        assert_eq!(v.dtype, Dtype::F32);
    }

    #[test]
    fn on_disk_order_is_first_axis_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        // C index of (x, y) is 2x + y.
        let data = vec![0.0, 1.0, 2.0, 3.0];
        write(&p, &[2, 2], &data, Dtype::U8, "").unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[VOX_OFFSET..VOX_OFFSET + 4], &[0, 2, 1, 3]);
        assert_eq!(&bytes[344..348], b"n+1\0");
    }

    #[test]
    fn integer_labels_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.nii.gz");
        let data = vec![-1.0, 0.0, 7.0, 3.0, -1.0, 5.0];
        write(&p, &[1, 2, 3], &data, Dtype::I32, "codes").unwrap();
        assert_eq!(read(&p).unwrap().data, data);
    }

    #[test]
    fn rejects_mismatched_length() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write(&dir.path().join("x.nii"), &[2, 2], &[0.0; 3], Dtype::F32, "").is_err());
    }
}
