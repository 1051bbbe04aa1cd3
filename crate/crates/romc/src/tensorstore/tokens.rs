//! Pre-tokenized calibration batches.
//!
//! File format is JSON lines: a header `{"batch": B, "seq_len": S,
//! "vocab_size": V}` followed by exactly B lines, each a JSON array of
//! exactly S token ids. `vocab_size` is optional; when present every id is
//! range-checked against it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub vocab_size: Option<usize>,
    ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    batch: usize,
    seq_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
}

impl TokenBatch {
    pub fn new(
        batch: usize,
        seq_len: usize,
        vocab_size: Option<usize>,
        ids: Vec<u32>,
    ) -> Result<Self> {
        if ids.len() != batch * seq_len {
            return Err(Error::Format(format!(
                "token batch of {batch}x{seq_len} needs {} ids, got {}",
                batch * seq_len,
                ids.len()
            )));
        }
        if let Some(v) = vocab_size {
            if let Some(bad) = ids.iter().find(|&&id| id as usize >= v) {
                return Err(Error::Range(format!(
                    "token id {bad} >= vocab_size {v}"
                )));
            }
        }
        Ok(TokenBatch { batch, seq_len, vocab_size, ids })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
        let header: Header = serde_json::from_str(header_line)
            .map_err(|e| Error::Format(format!("{}: bad header line: {e}", path.display())))?;

        let mut ids = Vec::with_capacity(header.batch * header.seq_len);
        let mut rows = 0usize;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<u64> = serde_json::from_str(line).map_err(|e| {
                Error::Format(format!("{}: bad row {}: {e}", path.display(), rows + 1))
            })?;
            if row.len() != header.seq_len {
                return Err(Error::Format(format!(
                    "{}: row {} has {} ids, expected {}",
                    path.display(),
                    rows + 1,
                    row.len(),
                    header.seq_len
                )));
            }
            for id in row {
                ids.push(u32::try_from(id).map_err(|_| {
                    Error::Range(format!("token id {id} does not fit in 32 bits"))
                })?);
            }
            rows += 1;
        }
        if rows != header.batch {
            return Err(Error::Format(format!(
                "{}: {} token rows, header declares {}",
                path.display(),
                rows,
                header.batch
            )));
        }
        TokenBatch::new(header.batch, header.seq_len, header.vocab_size, ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = serde_json::to_string(&Header {
            batch: self.batch,
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
        })
        .expect("header is serializable");
        out.push('\n');
        for b in 0..self.batch {
            out.push_str(&serde_json::to_string(self.row(b)).expect("ids are serializable"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Total number of token positions, i.e. activation rows: B*S.
    pub fn n_tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    #[inline]
    pub fn id(&self, b: usize, s: usize) -> u32 {
        self.ids[b * self.seq_len + s]
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn well_formed_batch_loads() {
        let path = tmp("ok.jsonl");
        fs::write(
            &path,
            "{\"batch\":2,\"seq_len\":3,\"vocab_size\":10}\n[1,2,3]\n[4,5,6]\n",
        )
        .unwrap();
        let tb = TokenBatch::load(&path).unwrap();
        assert_eq!((tb.batch, tb.seq_len), (2, 3));
        assert_eq!(tb.ids(), &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn wrong_id_count_is_a_format_error() {
        let path = tmp("short.jsonl");
        fs::write(
            &path,
            "{\"batch\":2,\"seq_len\":3}\n[1,2,3]\n[4,5]\n",
        )
        .unwrap();
        assert!(matches!(TokenBatch::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_vocab_id_is_a_range_error() {
        let path = tmp("range.jsonl");
        fs::write(
            &path,
            "{\"batch\":1,\"seq_len\":2,\"vocab_size\":5}\n[1,7]\n",
        )
        .unwrap();
        assert!(matches!(TokenBatch::load(&path), Err(Error::Range(_))));
    }

    #[test]
    fn calibration_scale_batch_loads() {
        // the default calibration shape: 512 sequences of 128 tokens
        let path = tmp("calib.jsonl");
        let ids: Vec<u32> = (0..512u32 * 128).map(|i| i % 32000).collect();
        let tb = TokenBatch::new(512, 128, Some(32000), ids).unwrap();
        tb.save(&path).unwrap();
        let loaded = TokenBatch::load(&path).unwrap();
        assert_eq!(loaded.n_tokens(), 65536);
        assert_eq!(loaded, tb);
    }

    #[test]
    fn round_trip_preserves_rows() {
        let tb = TokenBatch::new(3, 2, None, vec![9, 8, 7, 6, 5, 4]).unwrap();
        let path = tmp("rt.jsonl");
        tb.save(&path).unwrap();
        assert_eq!(TokenBatch::load(&path).unwrap(), tb);
        assert_eq!(tb.row(1), &[7, 6]);
        assert_eq!(tb.id(2, 0), 5);
    }
}
