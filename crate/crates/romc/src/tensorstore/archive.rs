//! Header-framed weight archives, layout-compatible with the common
//! safe-tensor format so real checkpoints load directly.
//!
//! ```text
//! bytes 0..8    little-endian u64 header length H
//! bytes 8..8+H  UTF-8 JSON: name -> {"dtype", "shape", "data_offsets"}
//! rest          contiguous little-endian tensor payloads
//! ```
//!
//! `data_offsets` are relative to the first byte after the header. An
//! optional `"__metadata__"` object is tolerated and ignored on read.
//! Writes are deterministic: entries are laid out and serialized in
//! name-sorted order, so equal inputs produce byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::dtype::{self, Dtype};
use crate::tensorstore::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte range within the data block.
    pub begin: u64,
    pub end: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.end - self.begin
    }
}

/// Index over an archive on disk. Opening reads only the header; each
/// tensor is fetched from its own byte range on demand.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    path: PathBuf,
    data_start: u64,
    entries: BTreeMap<String, TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

impl TensorArchive {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file
            .metadata()
            .map_err(|e| Error::io(path, e))?
            .len();
        if file_len < 8 {
            return Err(Error::Format(format!(
                "{}: too short for a header frame",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > file_len - 8 {
            return Err(Error::Format(format!(
                "{}: header length {} exceeds file size {}",
                path.display(),
                header_len,
                file_len
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("{}: bad header JSON: {e}", path.display())))?;

        let data_len = file_len - 8 - header_len;
        let mut entries = BTreeMap::new();
        for (name, value) in raw {
            if name == "__metadata__" {
                continue;
            }
            let he: HeaderEntry = serde_json::from_value(value).map_err(|e| {
                Error::Format(format!("{}: bad entry for {name:?}: {e}", path.display()))
            })?;
            let dtype = Dtype::parse(&he.dtype)?;
            let [begin, end] = he.data_offsets;
            if begin > end || end > data_len {
                return Err(Error::Integrity(format!(
                    "tensor {name:?} byte range {begin}..{end} outside data block of {data_len} bytes"
                )));
            }
            let numel: usize = he.shape.iter().product();
            if (end - begin) as usize != numel * dtype.width() {
                return Err(Error::Integrity(format!(
                    "tensor {name:?} byte range {begin}..{end} does not match shape {:?} of {dtype}",
                    he.shape
                )));
            }
            entries.insert(
                name,
                TensorEntry { dtype, shape: he.shape, begin, end },
            );
        }

        // ranges must not overlap
        let mut ranges: Vec<(&String, &TensorEntry)> = entries.iter().collect();
        ranges.sort_by_key(|(_, e)| e.begin);
        for pair in ranges.windows(2) {
            let (a_name, a) = pair[0];
            let (b_name, b) = pair[1];
            if b.begin < a.end {
                return Err(Error::Integrity(format!(
                    "tensors {a_name:?} and {b_name:?} have overlapping byte ranges"
                )));
            }
        }

        Ok(TensorArchive {
            path: path.to_path_buf(),
            data_start: 8 + header_len,
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &BTreeMap<String, TensorEntry> {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Total element count across all entries.
    pub fn total_elements(&self) -> u64 {
        self.entries.values().map(|e| e.numel() as u64).sum()
    }

    /// Raw little-endian payload of one tensor; reads only its byte range.
    pub fn load_raw(&self, name: &str) -> Result<Vec<u8>> {
        let entry = self.entry(name)?;
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        file.seek(SeekFrom::Start(self.data_start + entry.begin))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut bytes = vec![0u8; entry.byte_len() as usize];
        file.read_exact(&mut bytes).map_err(|e| Error::io(&self.path, e))?;
        Ok(bytes)
    }

    /// Load one tensor widened to f32. 1-D tensors come back as 1xN;
    /// higher-rank tensors are rejected.
    pub fn load_matrix(&self, name: &str) -> Result<Matrix> {
        let entry = self.entry(name)?.clone();
        let (rows, cols) = match entry.shape.len() {
            1 => (1, entry.shape[0]),
            2 => (entry.shape[0], entry.shape[1]),
            n => {
                return Err(Error::UnsupportedShape(format!(
                    "tensor {name:?} has {n} dimensions; only 1-D and 2-D are supported"
                )))
            }
        };
        let bytes = self.load_raw(name)?;
        let values = dtype::decode(entry.dtype, &bytes)?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "tensor {name:?} contains non-finite values"
            )));
        }
        Ok(Matrix::from_vec_unchecked(rows, cols, values))
    }
}

/// A tensor ready to be written: dtype, logical shape and raw payload.
#[derive(Clone, Debug)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_matrix(dtype: Dtype, m: &Matrix) -> Self {
        RawTensor {
            dtype,
            shape: vec![m.rows(), m.cols()],
            bytes: dtype::encode(dtype, m.data()),
        }
    }

    /// 1-D tensor from a flat slice, as checkpoints store norm gains.
    pub fn vector(dtype: Dtype, values: &[f32]) -> Self {
        RawTensor {
            dtype,
            shape: vec![values.len()],
            bytes: dtype::encode(dtype, values),
        }
    }
}

/// Write an archive with the exact on-disk framing above.
pub fn write_entries(
    path: impl AsRef<Path>,
    tensors: &BTreeMap<String, RawTensor>,
) -> Result<()> {
    let path = path.as_ref();
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        let numel: usize = t.shape.iter().product();
        if t.bytes.len() != numel * t.dtype.width() {
            return Err(Error::Dimension(format!(
                "tensor {name:?}: {} bytes does not match shape {:?} of {}",
                t.bytes.len(),
                t.shape,
                t.dtype
            )));
        }
        let end = offset + t.bytes.len() as u64;
        header.insert(
            name.clone(),
            HeaderEntry {
                dtype: t.dtype.name().to_string(),
                shape: t.shape.clone(),
                data_offsets: [offset, end],
            },
        );
        offset = end;
    }
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header serialization failed: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    for t in tensors.values() {
        w.write_all(&t.bytes).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write a map of matrices, each stored with shape `[rows, cols]`.
pub fn write_archive(
    path: impl AsRef<Path>,
    tensors: &BTreeMap<String, (Dtype, Matrix)>,
) -> Result<()> {
    let raw: BTreeMap<String, RawTensor> = tensors
        .iter()
        .map(|(name, (dt, m))| (name.clone(), RawTensor::from_matrix(*dt, m)))
        .collect();
    write_entries(path, &raw)
}
