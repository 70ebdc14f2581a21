//! `VFW1` little-endian weight container shared with the training scripts.
//!
//! Layout: magic `VFW1`, `u8` network type (1 = embedding CNN, 2 = decoder),
//! `u32` layer count, then per layer a `u8` layer code, `u8` rank, `rank` x
//! `u32` dimensions and the `f32` payload (weights, then biases where the
//! layer has them).
//!
//! | code | layer | dims | payload |
//! |------|-------|------|---------|
//! | 0 | input/seed shape | `[c, h, w]` | none |
//! | 1 | conv | `[out, in, k, k]` | weights, `out` biases |
//! | 2 | dense | `[out, in]` | weights, `out` biases |
//! | 3 | class weights | `[classes, dim]` | weights |
//! | 4 | head scalars | `[2]` | margin, scale |

use std::path::Path;

use super::cnn::{ConvLayer, DenseLayer, CLASS_DIM, CONV_CHANNELS, EMBED_DIM, FLAT_DIM, INPUT_HEIGHT, INPUT_WIDTH, KERNEL};
use super::decoder::DECODER_CHANNELS;
use super::{CnnModel, DecoderNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VFW1";
const NET_CNN: u8 = 1;
const NET_DECODER: u8 = 2;
const LAYER_SHAPE: u8 = 0;
const LAYER_CONV: u8 = 1;
const LAYER_DENSE: u8 = 2;
const LAYER_CLASSES: u8 = 3;
const LAYER_SCALARS: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkWeights {
    Cnn(CnnModel<f32>),
    Decoder(DecoderNet),
}

struct Layer {
    code: u8,
    dims: Vec<u32>,
    values: Vec<f32>,
}

fn payload_len(code: u8, dims: &[u32]) -> usize {
    let prod: usize = dims.iter().map(|d| *d as usize).product();
    match code {
        LAYER_SHAPE => 0,
        LAYER_CONV | LAYER_DENSE => prod + dims.first().copied().unwrap_or(0) as usize,
        _ => prod,
    }
}

fn put_layer(out: &mut Vec<u8>, code: u8, dims: &[usize], parts: &[&[f32]]) {
    out.push(code);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for part in parts {
        for v in *part {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a network to `VFW1` bytes.
pub fn encode_weights(net: &NetworkWeights) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    match net {
        NetworkWeights::Cnn(m) => {
            out.push(NET_CNN);
            out.extend_from_slice(&7u32.to_le_bytes());
            put_layer(&mut out, LAYER_SHAPE, &[1, INPUT_HEIGHT, INPUT_WIDTH], &[]);
            for c in &m.convs {
                put_layer(&mut out, LAYER_CONV, &[c.out_c, c.in_c, c.k, c.k], &[&c.weight, &c.bias]);
            }
            let d = &m.dense;
            put_layer(&mut out, LAYER_DENSE, &[d.out, d.inp], &[&d.weight, &d.bias]);
            put_layer(&mut out, LAYER_CLASSES, &[m.num_classes, CLASS_DIM], &[&m.class_weights]);
            put_layer(&mut out, LAYER_SCALARS, &[2], &[&[m.margin, m.scale]]);
        }
        NetworkWeights::Decoder(n) => {
            out.push(NET_DECODER);
            out.extend_from_slice(&5u32.to_le_bytes());
            put_layer(&mut out, LAYER_SHAPE, &[DECODER_CHANNELS[0], n.seed_height, n.seed_width], &[]);
            let d = &n.dense;
            put_layer(&mut out, LAYER_DENSE, &[d.out, d.inp], &[&d.weight, &d.bias]);
            for c in &n.convs {
                put_layer(&mut out, LAYER_CONV, &[c.out_c, c.in_c, c.k, c.k], &[&c.weight, &c.bias]);
            }
        }
    }
    out
}

pub fn save_weights(net: &NetworkWeights, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(net)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated { offset: self.pos, what: what.into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_layer(r: &mut Reader<'_>, index: usize) -> Result<Layer> {
    let code = r.u8("layer type")?;
    if code > LAYER_SCALARS {
        return Err(Error::InvalidWeights(format!("layer {index} has unknown type {code}")));
    }
    let rank = r.u8("layer rank")? as usize;
    let dims = (0..rank).map(|_| r.u32("layer dims")).collect::<Result<Vec<_>>>()?;
    let n = payload_len(code, &dims);
    // Guard against absurd sizes before allocating.
    if n.checked_mul(4).is_none_or(|b| b > r.bytes.len() - r.pos) {
        return Err(Error::Truncated {
            offset: r.pos,
            what: "layer weights".into(),
        });
    }
    let raw = r.take(n * 4, "layer weights")?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Layer { code, dims, values })
}

struct Layers {
    items: Vec<Layer>,
    next: usize,
}

impl Layers {
    /// Pops the next layer, checking its code and dims (`None` = any value).
    fn expect(&mut self, code: u8, dims: &[Option<usize>]) -> Result<Layer> {
        let index = self.next;
        let layer = self
            .items
            .get_mut(index)
            .map(|l| std::mem::replace(l, Layer { code: 0, dims: vec![], values: vec![] }))
            .ok_or_else(|| Error::InvalidWeights(format!("missing layer {index}")))?;
        self.next += 1;
        let found = layer.dims.clone();
        let expected: Vec<u32> = dims
            .iter()
            .zip(found.iter().chain(std::iter::repeat(&0)))
            .map(|(e, f)| e.map(|v| v as u32).unwrap_or(*f))
            .collect();
        if layer.code != code || found != expected {
            return Err(Error::ShapeMismatch {
                layer: index,
                expected,
                found,
            });
        }
        Ok(layer)
    }
}

fn split_conv(l: Layer) -> ConvLayer<f32> {
    let (out_c, in_c, k) = (l.dims[0] as usize, l.dims[1] as usize, l.dims[2] as usize);
    let mut weight = l.values;
    let bias = weight.split_off(out_c * in_c * k * k);
    ConvLayer {
        out_c,
        in_c,
        k,
        weight,
        bias,
    }
}

fn split_dense(l: Layer) -> DenseLayer<f32> {
    let (out, inp) = (l.dims[0] as usize, l.dims[1] as usize);
    let mut weight = l.values;
    let bias = weight.split_off(out * inp);
    DenseLayer { out, inp, weight, bias }
}

/// Parses `VFW1` bytes, validating every layer against the fixed topologies.
pub fn decode_weights(bytes: &[u8]) -> Result<NetworkWeights> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let net = r.u8("network type")?;
    let count = r.u32("layer count")? as usize;
    if count > 64 {
        return Err(Error::InvalidWeights(format!("implausible layer count {count}")));
    }
    let items = (0..count).map(|i| read_layer(&mut r, i)).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::InvalidWeights(format!(
            "{} trailing bytes after layer {}",
            bytes.len() - r.pos,
            count
        )));
    }
    let mut layers = Layers { items, next: 0 };
    let s = Some;
    match net {
        NET_CNN => {
            if count != 7 {
                return Err(Error::InvalidWeights(format!("CNN needs 7 layers, found {count}")));
            }
            layers.expect(LAYER_SHAPE, &[s(1), s(INPUT_HEIGHT), s(INPUT_WIDTH)])?;
            let mut convs = Vec::new();
            let mut in_c = 1;
            for &out_c in &CONV_CHANNELS {
                convs.push(split_conv(layers.expect(LAYER_CONV, &[s(out_c), s(in_c), s(KERNEL), s(KERNEL)])?));
                in_c = out_c;
            }
            let dense = split_dense(layers.expect(LAYER_DENSE, &[s(EMBED_DIM), s(FLAT_DIM)])?);
            let classes = layers.expect(LAYER_CLASSES, &[None, s(CLASS_DIM)])?;
            let scalars = layers.expect(LAYER_SCALARS, &[s(2)])?;
            let model = CnnModel {
                convs,
                dense,
                num_classes: classes.dims[0] as usize,
                class_weights: classes.values,
                margin: scalars.values[0],
                scale: scalars.values[1],
            };
            model.validate()?;
            Ok(NetworkWeights::Cnn(model))
        }
        NET_DECODER => {
            if count != 5 {
                return Err(Error::InvalidWeights(format!("decoder needs 5 layers, found {count}")));
            }
            let shape = layers.expect(LAYER_SHAPE, &[s(DECODER_CHANNELS[0]), None, None])?;
            let (h0, w0) = (shape.dims[1] as usize, shape.dims[2] as usize);
            let dense = split_dense(layers.expect(LAYER_DENSE, &[s(DECODER_CHANNELS[0] * h0 * w0), None])?);
            let mut convs = Vec::new();
            for i in 0..3 {
                let dims = [s(DECODER_CHANNELS[i + 1]), s(DECODER_CHANNELS[i]), s(3), s(3)];
                convs.push(split_conv(layers.expect(LAYER_CONV, &dims)?));
            }
            let net = DecoderNet {
                latent_dim: dense.inp,
                seed_height: h0,
                seed_width: w0,
                dense,
                convs,
            };
            net.validate()?;
            Ok(NetworkWeights::Decoder(net))
        }
        other => Err(Error::InvalidWeights(format!("unknown network type {other}"))),
    }
}
