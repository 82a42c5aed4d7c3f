//! Little-endian checkpoint format.
//!
//! ```text
//! "CFPN" | version: u32 | record*
//! record = name_len: u32 | name bytes | rank: u32 | dims: u32 * rank | f64 * numel
//! ```
//! Records run to end of file. Batch-norm running statistics are stored as
//! ordinary records whose names end in `.running_mean` / `.running_var`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFPN";
pub const VERSION: u32 = 1;

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params.params.iter().chain(&params.buffers) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Decode {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected CFPN"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let mut params = ModelParams::default();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("record name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| r.fail(e.to_string()))?;
        let slot = if is_buffer(&name) {
            &mut params.buffers
        } else {
            &mut params.params
        };
        slot.insert(name, t);
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Checks that a loaded checkpoint has exactly the tensors `expected` has, with the same shapes.
pub fn check_compatible(loaded: &ModelParams, expected: &ModelParams) -> Result<()> {
    for (ours, theirs) in [
        (&loaded.params, &expected.params),
        (&loaded.buffers, &expected.buffers),
    ] {
        for (name, t) in theirs {
            match ours.get(name) {
                None => return Err(Error::MissingParam(name.clone())),
                Some(l) if l.shape() != t.shape() => {
                    return Err(Error::ShapeMismatch {
                        op: "checkpoint",
                        lhs: l.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = ours.keys().find(|k| !theirs.contains_key(*k)) {
            return Err(Error::Config(format!(
                "checkpoint has unexpected tensor `{extra}`"
            )));
        }
    }
    Ok(())
}
