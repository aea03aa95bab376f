//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "VGUN" | u16 version | u32 header_len | header JSON
//! u32 tensor_count
//! per tensor, sorted by name:
//!   u16 name_len | name | u8 rank | u32 dims[rank] | f32 value[n] | f32 m[n] | f32 v[n]
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpochRecord;
use crate::model::{build, ArchitectureSpec, Model};
use crate::nn::AdamConfig;
use crate::{Error, Result, TOOL_VERSION};

const MAGIC: &[u8; 4] = b"VGUN";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A trained model with optimizer state and provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Epoch the parameters were taken after (1-based).
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Resolved run configuration of the producing command.
    pub run_config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tool_version: String,
    arch: ArchitectureSpec,
    seed: u64,
    epoch: usize,
    adam: AdamConfig,
    history: Vec<EpochRecord>,
    run_config: serde_json::Value,
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        tool_version: TOOL_VERSION.to_string(),
        arch: *ckpt.model.spec(),
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        adam: ckpt.adam,
        history: ckpt.history.clone(),
        run_config: ckpt.run_config.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut params: Vec<_> = ckpt.model.params().iter().collect();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, &p.value);
        put_f32s(&mut out, &p.adam_m);
        put_f32s(&mut out, &p.adam_v);
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(ckpt)?)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(format!("checkpoint truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("tensor size overflows"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }
}

/// Parses a checkpoint. With `spec` set, tensors are loaded into a model
/// built from that spec instead of the stored one.
pub fn checkpoint_from_bytes(buf: &[u8], spec: Option<&ArchitectureSpec>) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("not a checkpoint: bad magic bytes"));
    }
    let version = c.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = c.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(c.take(header_len, "header")?)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let arch = spec.copied().unwrap_or(header.arch);
    let mut model = build(&arch, header.seed)?;
    let count = c.u32("tensor count")? as usize;
    let mut loaded = vec![false; model.params().len()];
    for _ in 0..count {
        let name_len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u8("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let idx = model
            .params()
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::format(format!("unknown tensor `{name}` in checkpoint")))?;
        let p = &mut model.params_mut()[idx];
        if p.shape != shape {
            return Err(Error::ShapeMismatch {
                name,
                expected: p.shape.clone(),
                found: shape,
            });
        }
        let n = p.numel();
        p.value = c.f32s(n, &name)?;
        p.adam_m = c.f32s(n, &name)?;
        p.adam_v = c.f32s(n, &name)?;
        loaded[idx] = true;
    }
    if c.pos != buf.len() {
        return Err(Error::format("trailing bytes after the last tensor"));
    }
    if let Some(i) = loaded.iter().position(|l| !l) {
        return Err(Error::format(format!("checkpoint lacks tensor `{}`", model.params()[i].name)));
    }
    Ok(Checkpoint {
        model,
        adam: header.adam,
        seed: header.seed,
        epoch: header.epoch,
        history: header.history,
        run_config: header.run_config,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf, None)
}

/// Loads tensors into a model of the given architecture; a checkpoint of a
/// different width fails on the first tensor (by name) whose shape differs.
pub fn load_checkpoint_for(path: impl AsRef<Path>, spec: &ArchitectureSpec) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf, Some(spec))
}
