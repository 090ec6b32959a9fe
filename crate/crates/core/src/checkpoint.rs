//! Binary checkpoint of a client model: every named tensor, stored as
//! little-endian `f64` regardless of the in-memory scalar type.
//!
//! Layout: `FPCK`, version `u32`, record count `u32`, then per record the
//! name length `u32`, UTF-8 name, rank `u32`, dims `u64`, values `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ClientModel;
use crate::Scalar;

const MAGIC: &[u8; 4] = b"FPCK";
const VERSION: u32 = 1;

pub fn encode<S: Scalar>(model: &ClientModel<S>) -> Vec<u8> {
    let entries = model.entries();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint into its named tensors.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        if n.saturating_mul(8) > bytes.len() - r.pos {
            return Err(Error::Checkpoint(format!("truncated data for `{name}`")));
        }
        let data = (0..n).map(|_| r.f64().map(S::lit)).collect::<Result<Vec<S>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(out)
}

/// Copies tensors from a checkpoint into a model of the same architecture.
pub fn restore<S: Scalar>(model: &mut ClientModel<S>, bytes: &[u8]) -> Result<()> {
    let tensors = decode::<S>(bytes)?;
    let mut entries = model.entries_mut();
    if tensors.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            entries.len()
        )));
    }
    for (e, (name, t)) in entries.iter_mut().zip(&tensors) {
        if &e.name != name || e.tensor.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("tensor `{name}` does not match model tensor `{}`", e.name)));
        }
        e.tensor.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn save<S: Scalar>(model: &ClientModel<S>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model))?;
    Ok(())
}

pub fn load_into<S: Scalar>(model: &mut ClientModel<S>, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    restore(model, &bytes)
}
