//! Binary snapshot format.
//!
//! ```text
//! magic           8 bytes   "RAADFPS1"
//! format_version  u32 LE    1
//! dim             u32 LE    0 when no annotation ever fixed the dimension
//! count           u64 LE
//! count records:
//!   id              u64 LE
//!   created_at      i64 LE  epoch milliseconds, UTC
//!   source_event_id u32 LE length + UTF-8 bytes
//!   annotator       u32 LE length + UTF-8 bytes
//!   note            u32 LE length + UTF-8 bytes, length 0xFFFF_FFFF = absent
//!   embedding       dim x f64 LE
//! ```

use std::io::{self, Read, Write};

use chrono::{DateTime, TimeZone, Utc};

use super::{AnnotationId, FpAnnotation, Label};
use crate::embedding::EmbeddingVector;
use crate::error::StoreError;

pub const MAGIC: &[u8; 8] = b"RAADFPS1";
pub const FORMAT_VERSION: u32 = 1;
const NO_NOTE: u32 = u32::MAX;

/// In-memory image of a snapshot file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreSnapshot {
    pub format_version: u32,
    pub dim: Option<usize>,
    pub annotations: Vec<FpAnnotation>,
}

impl StoreSnapshot {
    pub fn count(&self) -> usize {
        self.annotations.len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let dim = self.dim.unwrap_or(0);
        let dim32 =
            u32::try_from(dim).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
        w.write_all(MAGIC)?;
        w.write_all(&self.format_version.to_le_bytes())?;
        w.write_all(&dim32.to_le_bytes())?;
        w.write_all(&(self.annotations.len() as u64).to_le_bytes())?;
        for a in &self.annotations {
            w.write_all(&a.id.0.to_le_bytes())?;
            w.write_all(&a.created_at.timestamp_millis().to_le_bytes())?;
            write_str(w, Some(&a.source_event_id))?;
            write_str(w, Some(&a.annotator))?;
            write_str(w, a.note.as_deref())?;
            for v in a.embedding.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses a complete snapshot. Trailing bytes after the last record are
    /// rejected.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, StoreError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(r, "format_version")?;
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dim = read_u32(r, "dim")? as usize;
        let count = read_u64(r, "count")?;
        if dim == 0 && count > 0 {
            return Err(corrupt("zero dimension with non-empty record list"));
        }

        let mut annotations = Vec::new();
        let mut last_id = 0u64;
        for i in 0..count {
            let id = read_u64(r, "record id")?;
            if i > 0 && id <= last_id {
                return Err(corrupt(&format!("ids not strictly increasing at record {i}")));
            }
            last_id = id;
            let millis = read_i64(r, "created_at")?;
            let created_at = Utc
                .timestamp_millis_opt(millis)
                .single()
                .ok_or_else(|| corrupt("timestamp out of range"))?;
            let source_event_id = read_str(r)?.ok_or_else(|| corrupt("missing source_event_id"))?;
            let annotator = read_str(r)?.ok_or_else(|| corrupt("missing annotator"))?;
            let note = read_str(r)?;
            let mut values = Vec::with_capacity(dim);
            let mut buf = [0u8; 8];
            for _ in 0..dim {
                read_exact(r, &mut buf, "embedding")?;
                values.push(f64::from_le_bytes(buf));
            }
            let embedding = EmbeddingVector::new(values).map_err(|e| corrupt(&format!("record {i}: {e}")))?;
            annotations.push(FpAnnotation {
                id: AnnotationId(id),
                embedding,
                label: Label::FalsePositive,
                source_event_id,
                annotator,
                created_at,
                note,
            });
        }

        let mut probe = [0u8; 1];
        match r.read(&mut probe) {
            Ok(0) => {}
            Ok(_) => return Err(corrupt("trailing bytes after last record")),
            Err(e) => return Err(StoreError::StorageFailure(e)),
        }

        Ok(StoreSnapshot {
            format_version: version,
            dim: (dim > 0).then_some(dim),
            annotations,
        })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, StoreError> {
        Self::read_from(&mut bytes)
    }
}

pub(crate) fn truncate_to_millis(t: DateTime<Utc>) -> DateTime<Utc> {
    Utc.timestamp_millis_opt(t.timestamp_millis())
        .single()
        .expect("millisecond timestamp of a valid DateTime is valid")
}

fn corrupt(msg: &str) -> StoreError {
    StoreError::CorruptSnapshot(msg.to_string())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), StoreError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => corrupt(&format!("truncated while reading {what}")),
        _ => StoreError::StorageFailure(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64, StoreError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_i64<R: Read>(r: &mut R, what: &str) -> Result<i64, StoreError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(i64::from_le_bytes(b))
}

fn write_str<W: Write>(w: &mut W, s: Option<&str>) -> io::Result<()> {
    match s {
        None => w.write_all(&NO_NOTE.to_le_bytes()),
        Some(s) => {
            let len = u32::try_from(s.len())
                .ok()
                .filter(|&l| l != NO_NOTE)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "string too long"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(s.as_bytes())
        }
    }
}

fn read_str<R: Read>(r: &mut R) -> Result<Option<String>, StoreError> {
    let len = read_u32(r, "string length")?;
    if len == NO_NOTE {
        return Ok(None);
    }
    let mut buf = Vec::new();
    r.take(u64::from(len))
        .read_to_end(&mut buf)
        .map_err(StoreError::StorageFailure)?;
    if buf.len() != len as usize {
        return Err(corrupt("truncated string"));
    }
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| corrupt("string is not valid UTF-8"))
}
