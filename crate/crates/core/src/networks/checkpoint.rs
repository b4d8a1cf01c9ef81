//! Binary checkpoint format.
//!
//! ```text
//! "LRAD"            4 bytes
//! version           u32
//! metadata length   u32, then that many bytes of UTF-8 JSON
//! tensor count      u32
//! per tensor        u16 name length, name, u8 precision width, u8 rank, u32 dims
//! payloads          little-endian values, in manifest order
//! ```
//!
//! All integers are little-endian. The metadata JSON holds the network spec
//! under `"network"` plus whatever the caller supplies under `"extra"`.

use std::path::Path;

use serde_json::{json, Value};

use super::{build_networks, NetworkSpec, NetworkState};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"LRAD";
pub const VERSION: u32 = 1;

/// Serialises `state` and `extra` to bytes.
pub fn encode<T: Scalar>(state: &NetworkState<T>, extra: &Value) -> Result<Vec<u8>> {
    let meta = json!({
        "network": state.spec,
        "precision": T::PRECISION,
        "extra": extra,
    });
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let tensors = state.named_tensors();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::PRECISION.byte_width() as u8);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: String) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            detail,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated while reading {what}: expected at least {end} bytes, file has {}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    width: usize,
    shape: Vec<usize>,
}

struct Header {
    meta: Value,
    entries: Vec<Entry>,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: Value =
        serde_json::from_slice(meta_bytes).map_err(|e| r.fail(format!("metadata: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16("tensor name length")? as usize;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
            .map_err(|_| r.fail("tensor name is not UTF-8".into()))?;
        let width = r.u8("precision")? as usize;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        entries.push(Entry { name, width, shape });
    }
    Ok(Header {
        meta,
        entries,
        payload_start: r.pos,
    })
}

fn precision_of(meta: &Value, path: &Path) -> Result<Precision> {
    serde_json::from_value(meta["precision"].clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: format!("metadata precision: {e}"),
    })
}

/// Rebuilds the networks stored in `bytes`. Returns the state and the
/// caller's metadata.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(NetworkState<T>, Value)> {
    let fail = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let header = parse_header(bytes, path)?;
    let stored = precision_of(&header.meta, path)?;
    if stored != T::PRECISION {
        return Err(fail(format!(
            "checkpoint holds {stored:?} tensors, requested {:?}",
            T::PRECISION
        )));
    }
    let expected = header.payload_start
        + header
            .entries
            .iter()
            .map(|e| e.width * e.shape.iter().product::<usize>())
            .sum::<usize>();
    if bytes.len() != expected {
        return Err(fail(format!(
            "length mismatch: manifest implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let spec: NetworkSpec = serde_json::from_value(header.meta["network"].clone())
        .map_err(|e| fail(format!("metadata network spec: {e}")))?;
    let mut state = build_networks::<T>(&spec, 0)?;
    let mut slots = state.named_tensors_mut();
    if slots.len() != header.entries.len() {
        return Err(fail(format!(
            "manifest lists {} tensors, the network has {}",
            header.entries.len(),
            slots.len()
        )));
    }
    let mut pos = header.payload_start;
    for e in &header.entries {
        if e.width != T::PRECISION.byte_width() {
            return Err(fail(format!("tensor {} has element width {}", e.name, e.width)));
        }
        let slot = slots
            .iter_mut()
            .find(|(n, _)| *n == e.name)
            .ok_or_else(|| fail(format!("unknown tensor {}", e.name)))?;
        if slot.1.shape() != e.shape.as_slice() {
            return Err(fail(format!(
                "tensor {} has shape {:?}, expected {:?}",
                e.name,
                e.shape,
                slot.1.shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|i| T::read_le(&bytes[pos + i * e.width..pos + (i + 1) * e.width]))
            .collect();
        pos += n * e.width;
        *slot.1 = Tensor::new(&e.shape, data)?;
    }
    drop(slots);
    let extra = header.meta.get("extra").cloned().unwrap_or(Value::Null);
    Ok((state, extra))
}

pub fn write_checkpoint<T: Scalar>(state: &NetworkState<T>, extra: &Value, path: &Path) -> Result<()> {
    let bytes = encode(state, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(NetworkState<T>, Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    decode(&bytes, path)
}

/// Element precision recorded in a checkpoint file.
pub fn read_checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let header = parse_header(&bytes, path)?;
    precision_of(&header.meta, path)
}
