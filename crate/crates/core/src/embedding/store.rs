//! Binary embedding store.
//!
//! Layout (little-endian):
//!
//! ```text
//! "XPLE" | u32 version = 1 | u32 dimension | u64 count
//! count x { u32 key_length | key bytes (UTF-8) | u64 byte offset }
//! count x { dimension x f32 }
//! ```
//!
//! Byte offsets are absolute from the start of the file and must point at a
//! vector slot inside the payload block. Each slot is referenced exactly once.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::EmbeddingError;

pub const MAGIC: &[u8; 4] = b"XPLE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const MIN_INDEX_RECORD: usize = 4 + 8;

/// An opened store, held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    keys: Vec<String>,
    index: HashMap<String, usize>,
    // row-major, `keys.len() * dimension` values, rows in index order
    data: Vec<f32>,
}

impl EmbeddingStore {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(EmbeddingError::Format(format!(
                "bad magic bytes {magic:02x?}"
            )));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(EmbeddingError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let dimension = cur.u32("dimension")? as usize;
        let count = cur.u64("count")?;
        if dimension == 0 {
            return Err(EmbeddingError::Format("zero dimension".into()));
        }
        let max_records = (bytes.len().saturating_sub(HEADER_LEN) / MIN_INDEX_RECORD) as u64;
        if count > max_records {
            return Err(EmbeddingError::Format(format!(
                "truncated file: count {count} exceeds what {} bytes can hold",
                bytes.len()
            )));
        }
        let count = count as usize;

        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let key_len = cur.u32("key length")? as usize;
            let key = cur.take(key_len, "key")?;
            let key = std::str::from_utf8(key)
                .map_err(|_| EmbeddingError::Format(format!("index record {i}: key is not UTF-8")))?
                .to_string();
            let offset = cur.u64("offset")?;
            entries.push((key, offset));
        }

        let payload_start = cur.pos;
        let row_bytes = dimension
            .checked_mul(4)
            .ok_or_else(|| EmbeddingError::Format("dimension overflow".into()))?;
        let expected_len = count
            .checked_mul(row_bytes)
            .and_then(|n| n.checked_add(payload_start))
            .ok_or_else(|| EmbeddingError::Format("payload size overflow".into()))?;
        if bytes.len() < expected_len {
            return Err(EmbeddingError::Format(format!(
                "truncated file: {} bytes, expected {expected_len}",
                bytes.len()
            )));
        }
        if bytes.len() > expected_len {
            return Err(EmbeddingError::CorruptStore(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected_len
            )));
        }

        let mut index = HashMap::with_capacity(count);
        let mut slot_used = vec![false; count];
        let mut keys = Vec::with_capacity(count);
        let mut data = vec![0f32; count * dimension];
        for (row, (key, offset)) in entries.into_iter().enumerate() {
            let slot = u64::try_from(payload_start)
                .ok()
                .and_then(|start| offset.checked_sub(start))
                .filter(|rel| rel % row_bytes as u64 == 0)
                .map(|rel| rel / row_bytes as u64)
                .filter(|&slot| slot < count as u64)
                .ok_or_else(|| {
                    EmbeddingError::CorruptStore(format!(
                        "offset {offset} of {key:?} does not address a vector slot"
                    ))
                })? as usize;
            if std::mem::replace(&mut slot_used[slot], true) {
                return Err(EmbeddingError::CorruptStore(format!(
                    "vector slot {slot} referenced twice"
                )));
            }
            let start = payload_start + slot * row_bytes;
            let raw = &bytes[start..start + row_bytes];
            let out = &mut data[row * dimension..(row + 1) * dimension];
            for (dst, chunk) in out.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite(key));
            }
            if index.insert(key.clone(), row).is_some() {
                return Err(EmbeddingError::DuplicateKey(key));
            }
            keys.push(key);
        }

        Ok(EmbeddingStore {
            dimension,
            keys,
            index,
            data,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index
            .get(key)
            .map(|&row| &self.data[row * self.dimension..(row + 1) * self.dimension])
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    /// Entries in index order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys
            .iter()
            .zip(self.data.chunks_exact(self.dimension))
            .map(|(k, v)| (k.as_str(), v))
    }
}

pub fn open_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbeddingError> {
    let bytes = fs::read(path)?;
    EmbeddingStore::from_bytes(&bytes)
}

/// Write `entries` as a store file. All vectors must have `dimension` values.
pub fn write_store<K, V>(
    path: impl AsRef<Path>,
    dimension: usize,
    entries: impl IntoIterator<Item = (K, V)>,
) -> Result<(), EmbeddingError>
where
    K: Into<String>,
    V: AsRef<[f32]>,
{
    let mut writer = StoreWriter::new(dimension)?;
    for (key, vector) in entries {
        writer.push(key, vector.as_ref())?;
    }
    let mut file = fs::File::create(path)?;
    writer.write_to(&mut file)?;
    file.flush()?;
    Ok(())
}

/// Accumulates entries and serializes them in insertion order.
#[derive(Debug)]
pub struct StoreWriter {
    dimension: usize,
    keys: Vec<String>,
    seen: HashMap<String, ()>,
    data: Vec<f32>,
}

impl StoreWriter {
    pub fn new(dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension == 0 || u32::try_from(dimension).is_err() {
            return Err(EmbeddingError::Format(format!(
                "unsupported dimension {dimension}"
            )));
        }
        Ok(StoreWriter {
            dimension,
            keys: Vec::new(),
            seen: HashMap::new(),
            data: Vec::new(),
        })
    }

    pub fn push(&mut self, key: impl Into<String>, vector: &[f32]) -> Result<(), EmbeddingError> {
        let key = key.into();
        if vector.len() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dimension,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(key));
        }
        if u32::try_from(key.len()).is_err() {
            return Err(EmbeddingError::Format("key too long".into()));
        }
        if self.seen.insert(key.clone(), ()).is_some() {
            return Err(EmbeddingError::DuplicateKey(key));
        }
        self.keys.push(key);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let index_len: usize = self.keys.iter().map(|k| MIN_INDEX_RECORD + k.len()).sum();
        let payload_start = HEADER_LEN + index_len;
        let row_bytes = self.dimension * 4;
        let mut out = Vec::with_capacity(payload_start + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for (row, key) in self.keys.iter().enumerate() {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&((payload_start + row * row_bytes) as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EmbeddingError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                EmbeddingError::Format(format!("truncated file while reading {what} at byte {}", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, EmbeddingError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, EmbeddingError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
