//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "FOLDLM1" | u32 version | u64 len | config JSON (len bytes) | u32 tensor count
//! per tensor: u32 name len | name | u32 rows | u32 cols | rows*cols f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::Parameters;

const MAGIC: &[u8; 7] = b"FOLDLM1";
const VERSION: u32 = 1;

pub fn encode(params: &Parameters, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let specs = params.specs();
    out.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    params.visit(|name, (rows, cols), data| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Parameters, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Format("config too large".into()))?;
    let cfg: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let mut params = Parameters::init(&cfg)?;
    let count = r.u32()? as usize;
    let specs = params.specs();
    if count != specs.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {count}",
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for spec in &specs {
        let name_len = r.u32()? as usize;
        let name = r.take(name_len)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if name != spec.name.as_bytes() || rows != spec.rows || cols != spec.cols {
            return Err(Error::Format(format!(
                "tensor {} ({}x{}) does not match {} ({rows}x{cols})",
                spec.name,
                spec.rows,
                spec.cols,
                String::from_utf8_lossy(name)
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<_>>(),
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    let mut it = tensors.into_iter();
    params.visit_mut(|_, _, data| data.copy_from_slice(&it.next().expect("counted")));
    Ok((params, cfg))
}

pub fn save_checkpoint(path: &Path, params: &Parameters, cfg: &ModelConfig) -> Result<()> {
    std::fs::write(path, encode(params, cfg)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters, ModelConfig)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
