//! DCFW weight files: magic, version, layer records, trailing CRC-32.
//!
//! Layer record: one tag byte, `u32` geometry fields, then `f32` payload.
//!
//! | tag | layer   | geometry                          | payload              |
//! |-----|---------|-----------------------------------|----------------------|
//! | 1   | conv    | count, size, in_channels, padding | weights, biases      |
//! | 2   | pool    | size                              | none                 |
//! | 3   | lcn     | r                                 | kappa, alpha, beta   |
//! | 4   | fc      | out, in_height, in_width, in_ch   | weights, biases      |
//! | 5   | softmax | none                              | none                 |
//!
//! Padding is 0 for valid and 1 for same.

use std::path::Path;

use dcf_core::detector::RegressorWeights;
use dcf_core::error::{DcfError, Result};
use dcf_core::layers::{FcWeights, Layer, LcnParams, Network};
use dcf_core::scalar::Scalar;
use dcf_core::tensor::{KernelBank, Padding};

pub const MAGIC: &[u8; 4] = b"DCFW";
pub const VERSION: u16 = 1;

const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_LCN: u8 = 3;
const TAG_FC: u8 = 4;
const TAG_SOFTMAX: u8 = 5;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f32s<T: Scalar>(&mut self, values: &[T]) {
        for v in values {
            self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

/// Encodes any layer list, valid network or not.
pub fn encode_layers<T: Scalar>(layers: &[Layer<T>]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u32(layers.len());
    for layer in layers {
        match layer {
            Layer::Conv { bank, padding } => {
                w.0.push(TAG_CONV);
                w.u32(bank.count());
                w.u32(bank.size());
                w.u32(bank.in_channels());
                w.u32(usize::from(*padding == Padding::Same));
                w.f32s(bank.weights());
                w.f32s(bank.biases());
            }
            Layer::Pool { size } => {
                w.0.push(TAG_POOL);
                w.u32(*size);
            }
            Layer::Lcn(p) => {
                w.0.push(TAG_LCN);
                w.u32(p.r);
                w.f32s(&[p.kappa, p.alpha, p.beta]);
            }
            Layer::Fc(fc) => {
                w.0.push(TAG_FC);
                let (h, wd, c) = fc.in_shape();
                for v in [fc.out_count(), h, wd, c] {
                    w.u32(v);
                }
                w.f32s(fc.weights());
                w.f32s(fc.biases());
            }
            Layer::Softmax => w.0.push(TAG_SOFTMAX),
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DcfError::Format(format!("payload ends early at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let len = n.checked_mul(4).ok_or_else(|| DcfError::Format("declared geometry overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|b| T::of(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))))
            .collect())
    }
}

/// Checks the CRC, magic and version, then parses the layer records.
fn decode_layers<T: Scalar>(bytes: &[u8]) -> Result<Vec<Layer<T>>> {
    if bytes.len() < 4 {
        return Err(DcfError::Crc { stored: 0, computed: crc32fast::hash(bytes) });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DcfError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DcfError::Format("missing DCFW magic".into()));
    }
    let v = r.take(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != VERSION {
        return Err(DcfError::Format(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut layers = Vec::new();
    for i in 0..count {
        let layer = match r.u8()? {
            TAG_CONV => {
                let (n, size, c, pad) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let padding = match pad {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    p => return Err(DcfError::Format(format!("layer {i}: unknown padding code {p}"))),
                };
                let weights = r.f32s(n * size * size * c)?;
                let biases = r.f32s(n)?;
                Layer::Conv { bank: KernelBank::new(n, size, c, weights, biases)?, padding }
            }
            TAG_POOL => Layer::Pool { size: r.u32()? },
            TAG_LCN => {
                let rr = r.u32()?;
                let p: Vec<T> = r.f32s(3)?;
                Layer::Lcn(LcnParams::new(p[0], p[1], p[2], rr)?)
            }
            TAG_FC => {
                let (out, h, w, c) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let weights = r.f32s(out * h * w * c)?;
                let biases = r.f32s(out)?;
                Layer::Fc(FcWeights::new(out, h, w, c, weights, biases)?)
            }
            TAG_SOFTMAX => Layer::Softmax,
            t => return Err(DcfError::Format(format!("layer {i}: unknown kind tag {t}"))),
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(DcfError::Format(format!("{} unexpected bytes after the last layer", body.len() - r.pos)));
    }
    Ok(layers)
}

pub fn encode_network<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    encode_layers(net.layers())
}

pub fn decode_network<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    Network::new(decode_layers(bytes)?)
}

/// A regressor is stored as its two fully-connected stages; the window
/// side comes from the model it is paired with.
pub fn encode_regressor<T: Scalar>(reg: &RegressorWeights<T>) -> Vec<u8> {
    encode_layers(&[Layer::Fc(reg.hidden().clone()), Layer::Fc(reg.output().clone())])
}

pub fn decode_regressor<T: Scalar>(bytes: &[u8], window_side: usize) -> Result<RegressorWeights<T>> {
    let mut layers = decode_layers::<T>(bytes)?.into_iter();
    match (layers.next(), layers.next(), layers.next()) {
        (Some(Layer::Fc(hidden)), Some(Layer::Fc(output)), None) => RegressorWeights::new(hidden, output, window_side),
        _ => Err(DcfError::Format("a regressor file holds exactly two fully-connected layers".into())),
    }
}

pub fn save_network<T: Scalar>(path: &Path, net: &Network<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_network(net))?)
}

pub fn load_network<T: Scalar>(path: &Path) -> Result<Network<T>> {
    decode_network(&std::fs::read(path)?)
}

pub fn save_regressor<T: Scalar>(path: &Path, reg: &RegressorWeights<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_regressor(reg))?)
}

pub fn load_regressor<T: Scalar>(path: &Path, window_side: usize) -> Result<RegressorWeights<T>> {
    decode_regressor(&std::fs::read(path)?, window_side)
}

/// CRC-32 stored at the end of an encoded file.
pub fn stored_crc(bytes: &[u8]) -> Option<u32> {
    let tail = bytes.get(bytes.len().checked_sub(4)?..)?;
    Some(u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]))
}
