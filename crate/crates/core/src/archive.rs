//! Self-describing tensor archive used for checkpoints and graph caches.
//!
//! Layout: 8-byte magic `HPGARCH1`, little-endian `u64` header length, a JSON
//! header (`meta` object plus a tensor table with name, dtype, shape and byte
//! offset), then the raw little-endian tensor payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Mat;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HPGARCH1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: Value,
    tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    fn put(&mut self, name: &str, t: Tensor) {
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| n == name) {
            slot.1 = t;
        } else {
            self.tensors.push((name.to_string(), t));
        }
    }

    pub fn put_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.put(name, Tensor { shape, data: TensorData::F64(data) });
    }

    pub fn put_i64(&mut self, name: &str, shape: Vec<usize>, data: Vec<i64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.put(name, Tensor { shape, data: TensorData::I64(data) });
    }

    pub fn put_mat(&mut self, name: &str, m: &Mat) {
        let (r, c) = m.dim();
        self.put_f64(name, vec![r, c], m.iter().copied().collect());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("<archive>", format!("missing tensor `{name}`")))
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::F64(d) => Ok((&t.shape, d)),
            TensorData::I64(_) => Err(Error::format("<archive>", format!("tensor `{name}` is not f64"))),
        }
    }

    pub fn get_i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::I64(d) => Ok((&t.shape, d)),
            TensorData::F64(_) => Err(Error::format("<archive>", format!("tensor `{name}` is not i64"))),
        }
    }

    pub fn get_mat(&self, name: &str) -> Result<Mat> {
        let (shape, data) = self.get_f64(name)?;
        if shape.len() != 2 {
            return Err(Error::format("<archive>", format!("tensor `{name}` is not 2-D")));
        }
        Mat::from_shape_vec((shape[0], shape[1]), data.to_vec())
            .map_err(|e| Error::format("<archive>", e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            let dtype = match &t.data {
                TensorData::F64(d) => {
                    for x in d {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                    "f64"
                }
                TensorData::I64(d) => {
                    for x in d {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                    "i64"
                }
            };
            entries.push(Entry {
                name: name.clone(),
                dtype: dtype.to_string(),
                shape: t.shape.clone(),
                offset,
                bytes: payload.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("archive header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(origin, r.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor archive (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(&e.to_string()))?;
        let payload = &bytes[hend..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.bytes != n * 8 || e.offset + e.bytes > payload.len() {
                return Err(bad(&format!("tensor `{}` has an inconsistent extent", e.name)));
            }
            let raw = &payload[e.offset..e.offset + e.bytes];
            let words = raw.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("chunk of 8"));
            let data = match e.dtype.as_str() {
                "f64" => TensorData::F64(words.map(f64::from_le_bytes).collect()),
                "i64" => TensorData::I64(words.map(i64::from_le_bytes).collect()),
                other => return Err(bad(&format!("unknown dtype `{other}`"))),
            };
            tensors.push((e.name, Tensor { shape: e.shape, data }));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    /// Write via a temporary sibling and rename, so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
