//! Model files: architecture, parameters and optionally the optimizer state.
//!
//! All integers and floats are little-endian.
//!
//! | bytes            | content                                            |
//! |------------------|----------------------------------------------------|
//! | 8                | magic `NNLRP001`                                   |
//! | 4 (u32)          | format version, currently 1                        |
//! | 4 (u32)          | length `L` of the architecture text                |
//! | L                | UTF-8 architecture (`ModelConfig::to_text`)        |
//! | 1 (u8)           | 1 if optimizer state follows the parameters, else 0 |
//! | 4 (u32)          | number of parameter tensors                        |
//! | per tensor       | u32 rank `r`, `r` × u32 extents, f64 values        |
//! | 8 (u64)          | optimizer step count (only with optimizer state)   |
//! | per tensor       | first moments, then second moments, same encoding  |
//! | 4 (u32)          | CRC-32 (IEEE) of every preceding byte              |
//!
//! Parameter tensors are written layer by layer in `LayerParams::tensors`
//! order, batch-norm running statistics included. Moment tensors follow
//! `ParamSet::learnable` order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{layer_params_from, param_shapes, ModelConfig, ParamSet};
use crate::tensor::Tensor;
use crate::trainer::AdamState;

pub const MODEL_MAGIC: &[u8; 8] = b"NNLRP001";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn check_adam(params: &ParamSet, adam: &AdamState) -> Result<()> {
    let learnable = params.learnable();
    let ok = adam.m.len() == learnable.len()
        && adam.v.len() == learnable.len()
        && learnable
            .iter()
            .zip(adam.m.iter().zip(&adam.v))
            .all(|(p, (m, v))| m.shape() == p.shape() && v.shape() == p.shape());
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension("optimizer state does not match the parameters".into()))
    }
}

pub fn encode_model(config: &ModelConfig, params: &ParamSet, adam: Option<&AdamState>) -> Result<Vec<u8>> {
    params.validate(config)?;
    if let Some(a) = adam {
        check_adam(params, a)?;
    }
    let text = config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.push(u8::from(adam.is_some()));
    let tensors: Vec<&Tensor> = params.layers.iter().flat_map(|l| l.tensors()).collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        put_tensor(&mut out, t);
    }
    if let Some(a) = adam {
        out.extend_from_slice(&a.t.to_le_bytes());
        for t in a.m.iter().chain(&a.v) {
            put_tensor(&mut out, t);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::parse(what, "file ends early"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, expected: &[usize], what: &str) -> Result<Tensor> {
        let rank = self.u32(what)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u32(what)? as usize);
        }
        if shape != expected {
            return Err(Error::parse(
                "shape",
                format!("{what}: stored {shape:?}, architecture needs {expected:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::parse(what, e.to_string()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<SavedModel> {
    if bytes.len() < MODEL_MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::parse(
            "length",
            format!("{} bytes is too short for a model file", bytes.len()),
        ));
    }
    if &bytes[..8] != MODEL_MAGIC {
        return Err(Error::parse("magic", "not a model file (expected NNLRP001)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::parse("version", format!("unsupported format version {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::parse(
            "checksum",
            format!("stored {stored:#010x}, computed {actual:#010x}; the file is corrupt"),
        ));
    }

    let mut c = Cursor { bytes: body, at: 12 };
    let len = c.u32("architecture length")? as usize;
    let text =
        std::str::from_utf8(c.take(len, "architecture")?).map_err(|e| Error::parse("architecture", e.to_string()))?;
    let config = ModelConfig::parse(text)?;
    let has_adam = match c.take(1, "optimizer flag")?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::parse("optimizer flag", format!("{other} is neither 0 nor 1"))),
    };
    let count = c.u32("tensor count")? as usize;
    let expected: usize = config.layers.iter().map(|l| param_shapes(l).len()).sum();
    if count != expected {
        return Err(Error::parse(
            "shape",
            format!("{count} parameter tensors stored, architecture needs {expected}"),
        ));
    }
    let mut layers = Vec::with_capacity(config.layers.len());
    for (i, spec) in config.layers.iter().enumerate() {
        let tensors = param_shapes(spec)
            .iter()
            .map(|s| c.tensor(s, &format!("layer {i}")))
            .collect::<Result<Vec<_>>>()?;
        layers.push(layer_params_from(spec, tensors)?);
    }
    let params = ParamSet { layers };
    params.validate(&config)?;

    let adam = if has_adam {
        let t = c.u64("optimizer step")?;
        let shapes: Vec<Vec<usize>> = params.learnable().iter().map(|p| p.shape().to_vec()).collect();
        let mut read = |what: &str| shapes.iter().map(|s| c.tensor(s, what)).collect::<Result<Vec<_>>>();
        let m = read("first moment")?;
        let v = read("second moment")?;
        Some(AdamState { m, v, t })
    } else {
        None
    };
    if c.at != body.len() {
        return Err(Error::parse(
            "length",
            format!("{} unexpected trailing bytes", body.len() - c.at),
        ));
    }
    Ok(SavedModel { config, params, adam })
}

pub fn save_model(
    config: &ModelConfig,
    params: &ParamSet,
    path: impl AsRef<Path>,
    adam: Option<&AdamState>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(config, params, adam)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
