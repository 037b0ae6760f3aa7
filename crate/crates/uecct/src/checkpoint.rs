//! Versioned binary checkpoints: model config, registry code names, and
//! named parameter tensors, bit-exact across save/load.
//!
//! Layout (all integers little-endian u32 unless noted):
//! magic "UECC", format version, config (7 dims + variant byte), code-name
//! list, tensor list (name, dims, f64 little-endian data), and a trailing
//! SHA-256 of everything before it. The parser never panics on malformed
//! input; every length is bounds-checked before use.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AttentionVariant, ModelConfig, UecctModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UECC";
const FORMAT_VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 256;
const MAX_TENSORS: usize = 4096;
const MAX_DIMS: usize = 8;
const MAX_TOTAL_ELEMENTS: usize = 1 << 28;

/// Parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Names of the codes the model was trained against, in registry order.
    pub code_names: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Reassemble the model, validating tensor names and shapes.
    pub fn into_model(self) -> Result<UecctModel> {
        UecctModel::from_params(self.config, self.tensors)
    }
}

/// Serialize a model and its training registry to checkpoint bytes.
pub fn encode_checkpoint(model: &UecctModel, code_names: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let c = model.config();
    for dim in [c.layers, c.heads, c.d_k, c.d_l, c.d_f, c.n_max, c.s_max] {
        put_u32(&mut out, dim as u32);
    }
    out.push(match c.variant {
        AttentionVariant::Unified => 0,
        AttentionVariant::Vanilla => 1,
    });
    put_u32(&mut out, code_names.len() as u32);
    for name in code_names {
        put_str(&mut out, name);
    }
    put_u32(&mut out, model.params().len() as u32);
    for (name, tensor) in model.params() {
        put_str(&mut out, name);
        put_u32(&mut out, tensor.shape().len() as u32);
        for &d in tensor.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parse checkpoint bytes; rejects malformed input without panicking.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 32 {
        return Err(Error::data("checkpoint truncated before its checksum"));
    }
    let (payload, stored) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(payload);
    if digest.as_slice() != stored {
        return Err(Error::data("checkpoint checksum mismatch"));
    }
    let mut r = Reader {
        bytes: payload,
        pos: 0,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let variant = match r.byte()? {
        0 => AttentionVariant::Unified,
        1 => AttentionVariant::Vanilla,
        other => return Err(Error::data(format!("unknown attention variant tag {other}"))),
    };
    let config = ModelConfig {
        layers: dims[0],
        heads: dims[1],
        d_k: dims[2],
        d_l: dims[3],
        d_f: dims[4],
        n_max: dims[5],
        s_max: dims[6],
        variant,
    };
    config.validate()?;

    let code_count = r.u32()? as usize;
    if code_count > MAX_TENSORS {
        return Err(Error::data(format!("implausible code count {code_count}")));
    }
    let mut code_names = Vec::with_capacity(code_count);
    for _ in 0..code_count {
        code_names.push(r.string()?);
    }

    let tensor_count = r.u32()? as usize;
    if tensor_count > MAX_TENSORS {
        return Err(Error::data(format!("implausible tensor count {tensor_count}")));
    }
    let mut tensors = Vec::with_capacity(tensor_count);
    let mut total_elements = 0usize;
    for _ in 0..tensor_count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        if ndim > MAX_DIMS {
            return Err(Error::data(format!("tensor '{name}' claims {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u32()? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        total_elements = total_elements.saturating_add(numel);
        if total_elements > MAX_TOTAL_ELEMENTS {
            return Err(Error::data("checkpoint exceeds the element budget"));
        }
        let raw = r.take(numel.saturating_mul(8))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    if r.pos != payload.len() {
        return Err(Error::data(format!(
            "checkpoint has {} trailing bytes",
            payload.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        code_names,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, model: &UecctModel, code_names: &[String]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, code_names))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > MAX_NAME_LEN {
            return Err(Error::data(format!("name length {len} exceeds {MAX_NAME_LEN}")));
        }
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::data("name is not valid UTF-8"))
    }
}
