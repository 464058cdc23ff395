//! Binary weight archive.
//!
//! ```text
//! "IMIU1" | header length (u32 LE) | JSON header | payload (f32 LE) | FNV-1a-64 of payload (u64 LE)
//! ```
//!
//! The header carries the architecture spec, seed, epoch and the ordered
//! entry list (name, shape); the payload is every entry's values in that order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, Model};
use crate::error::{ArchiveError, Error, Result};
use crate::hash::fnv1a64;
use crate::nn::Shape;

pub const MAGIC: &[u8; 5] = b"IMIU1";
const LEN_BYTES: usize = 4;
const CHECKSUM_BYTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ArchiveMeta {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ArchitectureSpec,
    seed: u64,
    epoch: usize,
    entries: Vec<EntryHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    name: String,
    shape: [usize; 4],
}

fn header_bytes(model: &Model, meta: ArchiveMeta) -> Vec<u8> {
    let header = Header {
        spec: model.spec().clone(),
        seed: meta.seed,
        epoch: meta.epoch,
        entries: model
            .params()
            .entries()
            .iter()
            .map(|e| EntryHeader { name: e.name.clone(), shape: e.shape().dims() })
            .collect(),
    };
    serde_json::to_vec(&header).expect("header serializes")
}

pub fn encode_weights(model: &Model, meta: ArchiveMeta) -> Vec<u8> {
    let header = header_bytes(model, meta);
    let mut out = Vec::with_capacity(archive_size(model, meta));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let start = out.len();
    for e in model.params().entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out[start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

/// Exact size of the archive `encode_weights` produces.
pub fn archive_size(model: &Model, meta: ArchiveMeta) -> usize {
    MAGIC.len() + LEN_BYTES + header_bytes(model, meta).len() + 4 * model.count_parameters() + CHECKSUM_BYTES
}

pub fn decode_weights(bytes: &[u8], path: &Path, expected: Option<&ArchitectureSpec>) -> Result<(Model, ArchiveMeta)> {
    let fail = |kind| Error::Archive { path: path.to_path_buf(), kind };
    let prefix = MAGIC.len() + LEN_BYTES;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail(ArchiveError::BadMagic));
    }
    if bytes.len() < prefix {
        return Err(fail(ArchiveError::Truncated { expected: prefix, found: bytes.len() }));
    }
    let header_len = u32::from_le_bytes(bytes[MAGIC.len()..prefix].try_into().expect("4 bytes")) as usize;
    if bytes.len() < prefix + header_len {
        return Err(fail(ArchiveError::Truncated { expected: prefix + header_len, found: bytes.len() }));
    }
    let header: Header = serde_json::from_slice(&bytes[prefix..prefix + header_len])
        .map_err(|e| fail(ArchiveError::Header(e.to_string())))?;
    if let Some(spec) = expected {
        if *spec != header.spec {
            return Err(fail(ArchiveError::SpecMismatch { expected: spec.describe(), found: header.spec.describe() }));
        }
    }
    let count: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let start = prefix + header_len;
    let total = start + 4 * count + CHECKSUM_BYTES;
    if bytes.len() < total {
        return Err(fail(ArchiveError::Truncated { expected: total, found: bytes.len() }));
    }
    if bytes.len() > total {
        return Err(fail(ArchiveError::Header(format!("{} unexpected trailing bytes", bytes.len() - total))));
    }
    let payload = &bytes[start..total - CHECKSUM_BYTES];
    let stored = u64::from_le_bytes(bytes[total - CHECKSUM_BYTES..].try_into().expect("8 bytes"));
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(fail(ArchiveError::Checksum { stored, computed }));
    }

    let mut model = Model::build(&header.spec, header.seed).map_err(|e| fail(ArchiveError::Header(e.to_string())))?;
    let store = model.params_mut();
    if store.len() != header.entries.len() {
        return Err(fail(ArchiveError::Header(format!(
            "archive has {} entries, the architecture has {}",
            header.entries.len(),
            store.len()
        ))));
    }
    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for (id, e) in store.ids().collect::<Vec<_>>().into_iter().zip(&header.entries) {
        let [n, c, h, w] = e.shape;
        let entry = store.entry(id);
        if entry.name != e.name || entry.shape() != Shape::new(n, c, h, w) {
            return Err(fail(ArchiveError::Header(format!(
                "entry '{}' {:?} does not match parameter '{}' {}",
                e.name,
                e.shape,
                entry.name,
                entry.shape()
            ))));
        }
        for (dst, v) in store.value_mut(id).data_mut().iter_mut().zip(&mut values) {
            *dst = v;
        }
    }
    Ok((model, ArchiveMeta { seed: header.seed, epoch: header.epoch }))
}

/// Write atomically (temporary file + rename); returns the byte size.
pub fn save_weights(model: &Model, meta: ArchiveMeta, path: &Path) -> Result<u64> {
    let bytes = encode_weights(model, meta);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_weights(path: &Path, expected: Option<&ArchitectureSpec>) -> Result<(Model, ArchiveMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path, expected)
}
