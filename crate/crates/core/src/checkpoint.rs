//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | field        | type                         |
//! |--------------|------------------------------|
//! | magic        | `b"MESHCKPT"`                |
//! | version      | `u32` (= 1)                  |
//! | activation   | `u8` (0 tanh, 1 relu)        |
//! | frozen       | `u8` bitmask (encoder=1, bottleneck=2, classifier=4) |
//! | dim count    | `u32`                        |
//! | dims         | `u32` each                   |
//! | layers       | per layer: weight (row-major `f64`), bias (`f64`) |
//!
//! Layers appear in forward order: encoder layers, bottleneck, classifier.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, Dense, Group, ModelParams};

pub const MAGIC: &[u8; 8] = b"MESHCKPT";
pub const FORMAT_VERSION: u32 = 1;

const MAX_DIMS: usize = 64;
const MAX_WIDTH: usize = 1 << 20;

fn group_bit(g: Group) -> u8 {
    match g {
        Group::Encoder => 1,
        Group::Bottleneck => 2,
        Group::Classifier => 4,
    }
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let dims = params.dims();
    let mut out = Vec::with_capacity(32 + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match params.activation() {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    });
    out.push(params.frozen().iter().map(|&g| group_bit(g)).sum());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for (_, layer) in params.layers() {
        for v in layer.weight.as_slice().iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Decode(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Decode("size overflow".into()))?,
        )?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decode("non-finite weight".into()));
        }
        Ok(vals)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Decode(format!("unsupported version {version}")));
    }
    let activation = match r.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        t => return Err(Error::Decode(format!("unknown activation tag {t}"))),
    };
    let frozen = r.u8()?;
    if frozen & !7 != 0 {
        return Err(Error::Decode(format!("bad frozen mask {frozen:#x}")));
    }
    let ndims = r.u32()? as usize;
    if !(4..=MAX_DIMS).contains(&ndims) {
        return Err(Error::Decode(format!("dim count {ndims} out of range")));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        let d = r.u32()? as usize;
        if d == 0 || d > MAX_WIDTH {
            return Err(Error::Decode(format!("layer width {d} out of range")));
        }
        dims.push(d);
    }
    // every weight must be present before anything large is allocated
    let mut expected = 0usize;
    for w in dims.windows(2) {
        expected = w[0]
            .checked_mul(w[1])
            .and_then(|x| x.checked_add(w[1]))
            .and_then(|x| x.checked_mul(8))
            .and_then(|x| x.checked_add(expected))
            .ok_or_else(|| Error::Decode("size overflow".into()))?;
    }
    if bytes.len() - r.pos != expected {
        return Err(Error::Decode(format!(
            "expected {expected} bytes of weights, found {}",
            bytes.len() - r.pos
        )));
    }
    let mut layers = Vec::with_capacity(ndims - 1);
    for w in dims.windows(2) {
        let weight = Matrix::from_vec(w[0], w[1], r.f64s(w[0] * w[1])?)?;
        let bias = r.f64s(w[1])?;
        layers.push(Dense { weight, bias });
    }
    let classifier = layers.pop().expect("at least three layers");
    let bottleneck = layers.pop().expect("at least two layers");
    let mut params = ModelParams::from_layers(activation, layers, bottleneck, classifier)
        .map_err(|e| Error::Decode(e.to_string()))?;
    for g in Group::ALL {
        if frozen & group_bit(g) != 0 {
            params.freeze(g);
        }
    }
    Ok(params)
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
