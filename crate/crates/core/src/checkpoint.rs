//! Binary checkpoint codec.
//!
//! Layout, all integers little-endian `u64`, all values little-endian `f64`:
//!
//! ```text
//! format_version | param_count | model_version
//! repeated param_count times, in name order:
//!     name_len | name bytes (UTF-8) | rank | dims[rank] | data[prod(dims)]
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u64 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + params.total_len() * 8);
    put(&mut out, FORMAT_VERSION);
    put(&mut out, params.len() as u64);
    put(&mut out, params.version());
    for (name, t) in params.iter() {
        put(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape().len() as u64);
        for &d in t.shape() {
            put(&mut out, d as u64);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, pos: 0 };
    let fmt = r.u64()?;
    if fmt != FORMAT_VERSION {
        return Err(Error::Checkpoint(alloc::format!("unsupported format version {fmt}")));
    }
    let count = r.u64()?;
    let version = r.u64()?;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let len = r.len()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.len()?;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(alloc::format!("{name}: {e}")))?;
        if ps.contains(&name) {
            return Err(Error::Checkpoint(alloc::format!("duplicate parameter {name}")));
        }
        ps.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    ps.set_version(version);
    Ok(ps)
}

fn put(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint("unexpected end of data".into())),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}
