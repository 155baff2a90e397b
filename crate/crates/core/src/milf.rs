//! MILF: the little-endian binary interchange format for feature matrices.
//!
//! ```text
//! "MILF"            4 bytes magic
//! version           u16 (= 1)
//! id_len, id        u8 length + UTF-8 extractor id
//! m, d              u32, u32
//! has_coords        u8 (0 or 1)
//! coords            m × (i32 x, i32 y)    if has_coords
//! payload           m·d × f32, row-major
//! crc32             u32 over every preceding byte
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::features::{ExtractorRegistry, FeatureMatrix};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MILF";
pub const VERSION: u16 = 1;

pub fn encode(fm: &FeatureMatrix) -> Vec<u8> {
    let id = fm.extractor_id.as_bytes();
    let coords_len = fm.coords.as_ref().map_or(0, |c| c.len() * 8);
    let mut out = Vec::with_capacity(4 + 2 + 1 + id.len() + 9 + coords_len + fm.values.len() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(id.len() as u8);
    out.extend_from_slice(id);
    out.extend_from_slice(&(fm.m() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.d() as u32).to_le_bytes());
    match &fm.coords {
        Some(coords) => {
            out.push(1);
            for [x, y] in coords {
                out.extend_from_slice(&x.to_le_bytes());
                out.extend_from_slice(&y.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    for v in fm.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses and validates a MILF buffer. The checksum is verified before any
/// field is interpreted; the dimension is checked against `registry`.
pub fn decode(bytes: &[u8], registry: &ExtractorRegistry) -> Result<FeatureMatrix> {
    if bytes.len() < 4 + 2 + 1 + 8 + 1 + 4 {
        return Err(Error::Corrupt(format!("{} bytes is too short for a MILF file", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }

    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported version {version}")));
    }
    let id_len = r.u8()? as usize;
    let id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::Corrupt("extractor id is not UTF-8".into()))?;
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    if m == 0 || d == 0 {
        return Err(Error::Corrupt(format!("empty matrix {m}x{d}")));
    }
    let coords = match r.u8()? {
        0 => None,
        1 => {
            let mut c = Vec::with_capacity(m);
            for _ in 0..m {
                c.push([r.i32()?, r.i32()?]);
            }
            Some(c)
        }
        f => return Err(Error::Corrupt(format!("bad coordinate flag {f}"))),
    };
    let n = m.checked_mul(d).ok_or_else(|| Error::Corrupt("dimension overflow".into()))?;
    let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt("dimension overflow".into()))?)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let fm = FeatureMatrix::new(id, Tensor::new(m, d, values)?, coords)?;
    registry.validate(&fm)?;
    Ok(fm)
}
