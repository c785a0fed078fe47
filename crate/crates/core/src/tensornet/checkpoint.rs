//! `CKPT` parameter files: magic "CKPT" | version u32 | count u32 | per tensor:
//! name length u32, UTF-8 name, rank u32, extents u32 x rank, f32 payload.
//! Little-endian throughout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

pub fn encode_checkpoint(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<(), TensorError> {
    let file = fs::File::create(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_checkpoint(entries))
        .and_then(|_| w.flush())
        .map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            TensorError::Io(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, TensorError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(TensorError::Format("missing CKPT magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(TensorError::Format(format!("tensor {name}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = c.take(n.checked_mul(4).ok_or_else(|| TensorError::Format("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(TensorError::Format(format!("{} trailing bytes after checkpoint", buf.len() - c.pos)));
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, TensorError> {
    let buf = fs::read(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&buf)
}
