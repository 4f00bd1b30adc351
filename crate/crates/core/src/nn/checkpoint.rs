//! Parameter checkpoints.
//!
//! A record is `"FJET"`, a little-endian `u16` format version, a `u32`
//! length followed by a JSON header `{"net": NetSpec, "meta": {..}}`, then
//! the parameters as little-endian `f32`. A file is one or more records back
//! to back.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{NetSpec, ParamVector};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FJET";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub spec: NetSpec,
    pub params: ParamVector,
    pub meta: BTreeMap<String, Value>,
}

impl CheckpointRecord {
    pub fn new(spec: NetSpec, params: ParamVector) -> Self {
        Self {
            spec,
            params,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetSpec,
    #[serde(default)]
    meta: BTreeMap<String, Value>,
}

fn protocol(msg: impl Into<String>) -> Error {
    Error::Protocol(msg.into())
}

pub fn encode_records(records: &[CheckpointRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for rec in records {
        rec.params.check_spec(&rec.spec)?;
        let header = serde_json::to_vec(&Header {
            net: rec.spec.clone(),
            meta: rec.meta.clone(),
        })
        .map_err(|e| protocol(format!("cannot encode checkpoint header: {e}")))?;
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (i, &v) in rec.params.values().iter().enumerate() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::numeric(format!(
                    "parameter {i} ({v}) is not representable as f32"
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(protocol(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<CheckpointRecord>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        if cur.take(4)? != MAGIC {
            return Err(protocol(format!("bad magic at byte {}", cur.pos - 4)));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(protocol(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(cur.take(len)?)
            .map_err(|e| protocol(format!("bad checkpoint header: {e}")))?;
        header.net.validate()?;
        let count = header.net.param_count();
        let raw = cur.take(count * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let params = ParamVector::from_values(&header.net, values)?;
        records.push(CheckpointRecord {
            spec: header.net,
            params,
            meta: header.meta,
        });
    }
    if records.is_empty() {
        return Err(protocol("empty checkpoint"));
    }
    Ok(records)
}

pub fn write_checkpoint(path: &Path, records: &[CheckpointRecord]) -> Result<()> {
    let bytes = encode_records(records)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes)
}
