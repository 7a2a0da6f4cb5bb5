//! Binary tensor serialization.
//!
//! Record layout ("GPT1"): 4-byte magic `GPT1`, u8 dtype (0 = f32, 1 = f64),
//! u8 rank, little-endian u64 dims, then the row-major little-endian payload.
//! An archive is a single file holding a length-prefixed JSON manifest
//! (metadata plus name -> offset/shape/dtype) followed by concatenated
//! records.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GpoError, Result};

const MAGIC: &[u8; 4] = b"GPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(GpoError::TensorFormat(format!("unknown dtype code {other}"))),
        }
    }
}

/// Write one tensor record.
pub fn write_record<W: Write>(w: &mut W, arr: &ArrayD<f64>, dtype: DType) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype.code(), arr.ndim() as u8])?;
    for &dim in arr.shape() {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    // standard layout guarantees row-major iteration order
    match dtype {
        DType::F64 => {
            for &v in arr.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for &v in arr.iter() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read one tensor record; f32 payloads are widened to f64.
pub fn read_record<R: Read>(r: &mut R) -> Result<(ArrayD<f64>, DType)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GpoError::TensorFormat(format!("bad magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])?;
    let rank = head[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    match dtype {
        DType::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
        }
        DType::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..count {
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| GpoError::TensorFormat(format!("shape/payload mismatch: {e}")))?;
    Ok((arr, dtype))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    offset: u64,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: BTreeMap<String, ManifestEntry>,
}

/// Named tensor collection plus free-form JSON metadata, saved as one file.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub meta: serde_json::Value,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorArchive {
            tensors: BTreeMap::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: &str, arr: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), arr);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| GpoError::TensorFormat(format!("missing tensor `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // first pass: record sizes to compute offsets
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, arr) in &self.tensors {
            entries.insert(
                name.clone(),
                ManifestEntry {
                    offset,
                    shape: arr.shape().to_vec(),
                    dtype: DType::F64,
                },
            );
            let header = 4 + 2 + 8 * arr.ndim() as u64;
            offset += header + 8 * arr.len() as u64;
        }
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        for arr in self.tensors.values() {
            write_record(&mut w, arr, DType::F64)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let mlen = u64::from_le_bytes(b) as usize;
        let mut mbytes = vec![0u8; mlen];
        r.read_exact(&mut mbytes)?;
        let manifest: Manifest = serde_json::from_slice(&mbytes)?;
        let mut tensors = BTreeMap::new();
        // records were written in manifest (BTreeMap) order
        for (name, entry) in &manifest.tensors {
            let (arr, _) = read_record(&mut r)?;
            if arr.shape() != entry.shape.as_slice() {
                return Err(GpoError::TensorFormat(format!(
                    "tensor `{name}`: manifest shape {:?} != record shape {:?}",
                    entry.shape,
                    arr.shape()
                )));
            }
            tensors.insert(name.clone(), arr);
        }
        Ok(TensorArchive {
            tensors,
            meta: manifest.meta,
        })
    }
}
