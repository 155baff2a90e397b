//! Versioned checkpoint files: a JSON header followed by named `f32`
//! parameter blobs and a trailing CRC-32, little-endian throughout.
//!
//! ```text
//! "MILC" | u16 version | u32 header_len | header JSON
//! | u32 count | count × (u16 name_len | name | u8 kind | u32 rows | u32 cols | f32 data)
//! | u32 crc32 of everything before
//! ```

use std::fs;
use std::path::Path;

use milsurv_core::heads::{HeadConfig, MilHead};
use milsurv_core::params::ParamKind;
use milsurv_core::{Error, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::store::write_atomic;

pub const MAGIC: &[u8; 4] = b"MILC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub head: HeadConfig,
    pub extractors: String,
    pub seed: u64,
    pub fold: usize,
    pub epoch: usize,
    pub val_cindex: f64,
    pub config_hash: String,
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::Norm => 2,
        ParamKind::Token => 3,
    }
}

fn kind_from(code: u8) -> Result<ParamKind, Error> {
    Ok(match code {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::Norm,
        3 => ParamKind::Token,
        other => return Err(Error::Corrupt(format!("unknown parameter kind {other}"))),
    })
}

pub fn encode(header: &CheckpointHeader, params: &ParamStore<f32>) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(kind_code(p.kind));
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<f32>), Error> {
    if bytes.len() < 14 {
        return Err(Error::Corrupt("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(len)?).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let kind = kind_from(c.take(1)?[0])?;
        let (rows, cols) = (c.u32()? as usize, c.u32()? as usize);
        let raw = c.take(rows.checked_mul(cols).and_then(|x| x.checked_mul(4)).ok_or_else(|| Error::Corrupt("parameter too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        store.add(name, kind, Tensor::new(rows, cols, data)?);
    }
    if c.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after parameters".into()));
    }
    Ok((header, store))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &ParamStore<f32>) -> CliResult<()> {
    write_atomic(path, &encode(header, params))
}

pub fn load(path: &Path) -> CliResult<(CheckpointHeader, MilHead<f32>)> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let (header, params) = decode(&bytes).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let head = MilHead::with_params(header.head, params)?;
    Ok((header, head))
}
