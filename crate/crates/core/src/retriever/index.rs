//! Persistent flat index of unit vectors with exhaustive top-k search.
//!
//! File layout (little-endian): magic `CLSRINDX`, `u32` version, `u32` CRC-32 of
//! the payload, `u64` payload length, then the payload: `u32` dim, `u64` count,
//! `u32` window, `u32` hop, `u16` hash length + hash bytes, and `count` records
//! of `(u64 doc_id, u32 segment_index, dim x f32)`.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::error::{ClsrError, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"CLSRINDX";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;
/// Stored vectors must have unit norm within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMetadata {
    pub model_hash: String,
    pub window: u32,
    pub hop: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub doc_id: u64,
    pub segment_index: u32,
    pub vector: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub doc_id: u64,
    pub segment_index: u32,
    pub score: f64,
}

/// Immutable once built; searches take `&self`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    metadata: IndexMetadata,
}

/// Descending score, then ascending `(doc_id, segment_index)`.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.doc_id.cmp(&b.doc_id))
        .then(a.segment_index.cmp(&b.segment_index))
}

pub fn dot(query: &[f64], v: &[f32]) -> f64 {
    query.iter().zip(v).map(|(q, &x)| q * f64::from(x)).sum()
}

impl RetrievalIndex {
    pub fn new(dim: usize, metadata: IndexMetadata, entries: Vec<IndexEntry>) -> Result<Self> {
        if dim == 0 {
            return Err(ClsrError::Config("index dimension must be positive".into()));
        }
        for e in &entries {
            if e.vector.len() != dim {
                return Err(ClsrError::Shape(format!(
                    "entry ({}, {}) has dim {}, index dim {dim}",
                    e.doc_id,
                    e.segment_index,
                    e.vector.len()
                )));
            }
            let norm = e
                .vector
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(ClsrError::Data(format!(
                    "entry ({}, {}) has norm {norm}",
                    e.doc_id, e.segment_index
                )));
            }
        }
        Ok(Self { dim, entries, metadata })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn metadata(&self) -> &IndexMetadata {
        &self.metadata
    }

    /// Exhaustive scan; returns `min(k, len)` hits in [`rank_order`].
    pub fn search_topk(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(ClsrError::Config("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(ClsrError::Shape(format!(
                "query dim {} vs index dim {}",
                query.len(),
                self.dim
            )));
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .map(|e| Hit {
                doc_id: e.doc_id,
                segment_index: e.segment_index,
                score: dot(query, &e.vector),
            })
            .collect();
        let k = k.min(hits.len());
        if k < hits.len() {
            hits.select_nth_unstable_by(k, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Ok(hits)
    }

    /// Dimension mismatch is an error; metadata mismatches are returned (and logged) as warnings.
    pub fn check_compatible(
        &self,
        dim: usize,
        window: usize,
        hop: usize,
        model_hash: Option<&str>,
    ) -> Result<Vec<String>> {
        if dim != self.dim {
            return Err(ClsrError::Config(format!(
                "index dim {} does not match model dim {dim}",
                self.dim
            )));
        }
        let m = &self.metadata;
        let mut warnings = Vec::new();
        if m.window as usize != window || m.hop as usize != hop {
            warnings.push(format!(
                "index built with window={} hop={}, pipeline uses window={window} hop={hop}",
                m.window, m.hop
            ));
        }
        if let Some(h) = model_hash.filter(|h| *h != m.model_hash) {
            warnings.push(format!("index built by model {}, querying with {h}", m.model_hash));
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(warnings)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::with_capacity(32 + self.entries.len() * (12 + 4 * self.dim));
        p.extend_from_slice(&(self.dim as u32).to_le_bytes());
        p.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        p.extend_from_slice(&self.metadata.window.to_le_bytes());
        p.extend_from_slice(&self.metadata.hop.to_le_bytes());
        p.extend_from_slice(&(self.metadata.model_hash.len() as u16).to_le_bytes());
        p.extend_from_slice(self.metadata.model_hash.as_bytes());
        for e in &self.entries {
            p.extend_from_slice(&e.doc_id.to_le_bytes());
            p.extend_from_slice(&e.segment_index.to_le_bytes());
            for x in &e.vector {
                p.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + p.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let integrity = |message: &str| ClsrError::Integrity {
            path: origin.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != INDEX_MAGIC {
            return Err(integrity("not an index (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(ClsrError::Version {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let crc = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let p = &bytes[HEADER_LEN..];
        if p.len() as u64 != len {
            return Err(integrity("payload length mismatch"));
        }
        if crc32fast::hash(p) != crc {
            return Err(integrity("checksum mismatch"));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| -> Option<&[u8]> {
            let s = p.get(pos..pos.checked_add(n)?)?;
            pos += n;
            Some(s)
        };
        let parsed = (|| -> Option<(usize, IndexMetadata, Vec<IndexEntry>)> {
            let dim = u32::from_le_bytes(take(4)?.try_into().ok()?) as usize;
            let count = u64::from_le_bytes(take(8)?.try_into().ok()?) as usize;
            let window = u32::from_le_bytes(take(4)?.try_into().ok()?);
            let hop = u32::from_le_bytes(take(4)?.try_into().ok()?);
            let hlen = u16::from_le_bytes(take(2)?.try_into().ok()?) as usize;
            let model_hash = String::from_utf8(take(hlen)?.to_vec()).ok()?;
            let mut entries = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                let doc_id = u64::from_le_bytes(take(8)?.try_into().ok()?);
                let segment_index = u32::from_le_bytes(take(4)?.try_into().ok()?);
                let raw = take(dim.checked_mul(4)?)?;
                let vector = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                entries.push(IndexEntry {
                    doc_id,
                    segment_index,
                    vector,
                });
            }
            take(0)?;
            Some((
                dim,
                IndexMetadata {
                    model_hash,
                    window,
                    hop,
                },
                entries,
            ))
        })();
        let (dim, metadata, entries) = parsed.ok_or_else(|| integrity("malformed payload"))?;
        if pos != p.len() {
            return Err(integrity("trailing bytes after the last record"));
        }
        Self::new(dim, metadata, entries)
    }
}

pub fn save_index(path: &Path, index: &RetrievalIndex) -> Result<()> {
    fs::write(path, index.to_bytes()).map_err(|e| ClsrError::io(path, e))
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    let bytes = fs::read(path).map_err(|e| ClsrError::io(path, e))?;
    RetrievalIndex::from_bytes(&bytes, path)
}
