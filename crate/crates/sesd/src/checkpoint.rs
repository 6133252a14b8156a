//! SESD-CKPT-1 checkpoint blobs: a versioned header, a JSON metadata
//! section, a tensor manifest (name, dtype, shape, byte offset) and raw
//! little-endian IEEE-754 data, all covered by a trailing SHA-256 checksum.
//!
//! Single-precision tensors serialize as f32, double as f64; loading a blob
//! restores every value bitwise.

use crate::tensor::{Dtype, Tensor};
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8] = b"SESD-CKPT-1\n";

#[derive(Debug)]
pub struct CheckpointData {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    let meta_bytes = serde_json::to_vec(&data.meta)
        .map_err(|e| Error::Internal(format!("checkpoint meta serialization: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);

    // manifest
    buf.extend_from_slice(&(data.tensors.len() as u64).to_le_bytes());
    let mut offset: u64 = 0;
    for (name, t) in &data.tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(match t.dtype() {
            Dtype::Single => 0u8,
            Dtype::Double => 1u8,
        });
        buf.push(t.rank() as u8);
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        let elem = match t.dtype() {
            Dtype::Single => 4,
            Dtype::Double => 8,
        };
        offset += (t.len() * elem) as u64;
    }

    // data blob
    buf.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in &data.tensors {
        match t.dtype() {
            Dtype::Single => {
                for v in t.data() {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            Dtype::Double => {
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::User(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() < CKPT_MAGIC.len() + 32 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != sum {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    if &body[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        return Err(Error::Format(
            "not an SESD-CKPT-1 checkpoint (version mismatch or foreign file)".into(),
        ));
    }
    let mut cur = Cursor { buf: body, pos: CKPT_MAGIC.len() };
    let meta_len = cur.u64()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Format(format!("checkpoint meta parse: {e}")))?;
    let n_tensors = cur.u64()? as usize;
    struct Entry {
        name: String,
        dtype: Dtype,
        shape: Vec<usize>,
        offset: u64,
    }
    let mut entries = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("bad tensor name".into()))?;
        let dtype = match cur.u8()? {
            0 => Dtype::Single,
            1 => Dtype::Double,
            d => return Err(Error::Format(format!("unknown dtype tag {d}"))),
        };
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let offset = cur.u64()?;
        entries.push(Entry { name, dtype, shape, offset });
    }
    let data_len = cur.u64()? as usize;
    let blob = cur.take(data_len)?;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let elem = match e.dtype {
            Dtype::Single => 4,
            Dtype::Double => 8,
        };
        let start = e.offset as usize;
        if start + n * elem > blob.len() {
            return Err(Error::Format(format!("tensor {} overruns data blob", e.name)));
        }
        let mut data = Vec::with_capacity(n);
        match e.dtype {
            Dtype::Single => {
                for c in blob[start..start + n * 4].chunks_exact(4) {
                    data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
            }
            Dtype::Double => {
                for c in blob[start..start + n * 8].chunks_exact(8) {
                    data.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
        }
        tensors.push((e.name, Tensor::new(e.shape, data, e.dtype)?));
    }
    Ok(CheckpointData { meta, tensors })
}
