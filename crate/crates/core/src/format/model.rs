use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::pack::{pack_codes, packed_len, unpack_codes};
use crate::error::{Error, Result};
use crate::lognum::{QuantKind, QuantizerConfig, Rounding};
use crate::nn::{BatchNormParams, LayerKind, LayerParams, LayerSpec, ModelGraph, PoolGeometry, Weights};
use crate::tensor::{ConvGeometry, QTensor, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"LOGN";
pub const MODEL_VERSION: u16 = 1;

/// Bytes of a quantizer block.
pub const QUANT_BLOCK_LEN: usize = 7;

mod tag {
    pub const CONV: u8 = 0;
    pub const FC: u8 = 1;
    pub const RELU: u8 = 2;
    pub const MAXPOOL: u8 = 3;
    pub const BATCHNORM: u8 = 4;
    pub const LOGQUANT: u8 = 5;
    pub const LINEARQUANT: u8 = 6;
    pub const SOFTMAX: u8 = 7;

    pub const Q_NONE: u8 = 0;
    pub const Q_LOG: u8 = 1;
    pub const Q_LINEAR: u8 = 2;

    pub const DTYPE_NONE: u8 = 0;
    pub const DTYPE_F32: u8 = 1;
    pub const DTYPE_PACKED: u8 = 2;
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in u32")))
}

fn to_i16(v: i32, what: &str) -> Result<i16> {
    i16::try_from(v).map_err(|_| Error::config(format!("{what} {v} does not fit in i16")))
}

fn write_quant(out: &mut Vec<u8>, q: Option<&QuantizerConfig>, fsr: i32) -> Result<()> {
    let Some(q) = q else {
        out.extend([0u8; QUANT_BLOCK_LEN]);
        return Ok(());
    };
    out.push(match q.kind {
        QuantKind::Log => tag::Q_LOG,
        QuantKind::Linear => tag::Q_LINEAR,
    });
    out.push(q.bitwidth);
    out.push(q.signed as u8);
    out.write_i16::<LE>(to_i16(fsr, "fsr")?)?;
    out.push(q.base_frac_bits);
    out.push(match q.rounding {
        Rounding::FloorMsb => 0,
        Rounding::Nearest => 1,
    });
    Ok(())
}

fn write_f32s(out: &mut Vec<u8>, vals: &[f32]) -> Result<()> {
    out.push(tag::DTYPE_F32);
    out.write_u32::<LE>(to_u32(vals.len(), "element count")?)?;
    for &v in vals {
        out.write_f32::<LE>(v)?;
    }
    Ok(())
}

/// Serializes a graph. See `docs/formats.md` for the layout.
pub fn write_model(g: &ModelGraph) -> Result<Vec<u8>> {
    g.validate()?;
    let mut out = Vec::new();
    out.extend(MODEL_MAGIC);
    out.write_u16::<LE>(MODEL_VERSION)?;
    out.write_i16::<LE>(to_i16(g.global_fsr, "global fsr")?)?;
    out.write_u16::<LE>(
        u16::try_from(g.layers.len()).map_err(|_| Error::config("more than 65535 layers"))?,
    )?;
    for d in g.input_shape {
        out.write_u32::<LE>(to_u32(d, "input dimension")?)?;
    }
    for (layer, params) in g.layers.iter().zip(&g.params) {
        let geometry: Vec<usize> = match layer.kind {
            LayerKind::Conv { out_channels, geom } => {
                out.push(tag::CONV);
                vec![out_channels, geom.kernel_h, geom.kernel_w, geom.stride, geom.pad]
            }
            LayerKind::Fc { out_features } => {
                out.push(tag::FC);
                vec![out_features]
            }
            LayerKind::Relu => {
                out.push(tag::RELU);
                vec![]
            }
            LayerKind::MaxPool(p) => {
                out.push(tag::MAXPOOL);
                vec![p.kernel, p.stride]
            }
            LayerKind::BatchNorm => {
                out.push(tag::BATCHNORM);
                vec![]
            }
            LayerKind::LogQuant => {
                out.push(tag::LOGQUANT);
                vec![]
            }
            LayerKind::LinearQuant => {
                out.push(tag::LINEARQUANT);
                vec![]
            }
            LayerKind::Softmax => {
                out.push(tag::SOFTMAX);
                vec![]
            }
        };
        for v in geometry {
            out.write_u32::<LE>(to_u32(v, "geometry field")?)?;
        }
        let fsr = if layer.kind.is_quantizer() {
            layer.fsr_offset
        } else {
            layer.quant.map_or(0, |q| q.fsr)
        };
        write_quant(&mut out, layer.quant.as_ref(), fsr)?;
        match params {
            LayerParams::None => out.push(tag::DTYPE_NONE),
            LayerParams::Weights(Weights::Real(t)) => write_f32s(&mut out, t.data())?,
            LayerParams::Weights(Weights::Quantized(q)) => {
                out.push(tag::DTYPE_PACKED);
                write_quant(&mut out, Some(q.cfg()), q.cfg().fsr)?;
                out.write_u32::<LE>(to_u32(q.len(), "element count")?)?;
                out.extend(pack_codes(q.codes(), q.cfg())?);
            }
            LayerParams::BatchNorm(p) => {
                let mut vals = Vec::with_capacity(4 * p.gamma.len() + 1);
                for v in [&p.gamma, &p.beta, &p.running_mean, &p.running_var] {
                    vals.extend_from_slice(v);
                }
                vals.push(p.eps);
                write_f32s(&mut out, &vals)?;
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn err_at(&self, offset: u64, msg: impl Into<String>) -> Error {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    fn eof(&self) -> Error {
        self.err_at(self.offset(), "unexpected end of file")
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.eof())
    }

    fn u16(&mut self) -> Result<u16> {
        self.cur.read_u16::<LE>().map_err(|_| self.eof())
    }

    fn i16(&mut self) -> Result<i16> {
        self.cur.read_i16::<LE>().map_err(|_| self.eof())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(self.cur.read_u32::<LE>().map_err(|_| self.eof())? as usize)
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.eof())?;
        Ok(buf)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let remaining = self.cur.get_ref().len() as u64 - self.offset();
        if (n as u64) * 4 > remaining {
            return Err(self.eof());
        }
        (0..n)
            .map(|_| self.cur.read_f32::<LE>().map_err(|_| self.eof()))
            .collect()
    }

    /// Returns the quantizer and its stored FSR field.
    fn quant(&mut self) -> Result<(Option<QuantizerConfig>, i32)> {
        let at = self.offset();
        let kind = self.u8()?;
        let bitwidth = self.u8()?;
        let signed = self.u8()?;
        let fsr = self.i16()? as i32;
        let base_frac_bits = self.u8()?;
        let rounding = self.u8()?;
        let kind = match kind {
            tag::Q_NONE => {
                if [bitwidth, signed, base_frac_bits, rounding] != [0; 4] || fsr != 0 {
                    return Err(self.err_at(at, "empty quantizer block with non-zero fields"));
                }
                return Ok((None, 0));
            }
            tag::Q_LOG => QuantKind::Log,
            tag::Q_LINEAR => QuantKind::Linear,
            t => return Err(self.err_at(at, format!("unknown quantizer kind tag {t}"))),
        };
        let signed = match signed {
            0 => false,
            1 => true,
            v => return Err(self.err_at(at + 2, format!("signed flag {v} is not 0 or 1"))),
        };
        let rounding = match rounding {
            0 => Rounding::FloorMsb,
            1 => Rounding::Nearest,
            v => return Err(self.err_at(at + 6, format!("unknown rounding tag {v}"))),
        };
        let q = QuantizerConfig {
            kind,
            bitwidth,
            signed,
            fsr: 0,
            base_frac_bits,
            rounding,
        };
        q.validate().map_err(|e| self.err_at(at, e.to_string()))?;
        Ok((Some(q), fsr))
    }
}

/// Parses a file written by [`write_model`]. Unknown tags, size mismatches
/// and trailing bytes are errors naming the byte offset.
pub fn read_model(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader {
        cur: Cursor::new(bytes),
    };
    if r.bytes(4)? != MODEL_MAGIC {
        return Err(r.err_at(0, "bad magic, expected LOGN"));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(r.err_at(4, format!("unsupported version {version}")));
    }
    let global_fsr = r.i16()? as i32;
    let count = r.u16()? as usize;
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let mut layers = Vec::with_capacity(count);
    let mut raw_params = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let kind = match r.u8()? {
            tag::CONV => {
                let (oc, kh, kw, stride, pad) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                LayerKind::Conv {
                    out_channels: oc,
                    geom: ConvGeometry {
                        kernel_h: kh,
                        kernel_w: kw,
                        stride,
                        pad,
                    },
                }
            }
            tag::FC => LayerKind::Fc {
                out_features: r.u32()?,
            },
            tag::RELU => LayerKind::Relu,
            tag::MAXPOOL => {
                let (kernel, stride) = (r.u32()?, r.u32()?);
                LayerKind::MaxPool(PoolGeometry::new(kernel, stride))
            }
            tag::BATCHNORM => LayerKind::BatchNorm,
            tag::LOGQUANT => LayerKind::LogQuant,
            tag::LINEARQUANT => LayerKind::LinearQuant,
            tag::SOFTMAX => LayerKind::Softmax,
            t => return Err(r.err_at(at, format!("unknown layer kind tag {t}"))),
        };
        let q_at = r.offset();
        let (quant, fsr) = r.quant()?;
        let layer = if kind.is_quantizer() {
            LayerSpec {
                kind,
                quant,
                fsr_offset: fsr,
            }
        } else {
            LayerSpec {
                kind,
                quant: quant.map(|q| q.with_fsr(fsr)),
                fsr_offset: 0,
            }
        };
        layer.validate().map_err(|e| r.err_at(q_at, format!("layer {}: {e}", layers.len())))?;
        layers.push(layer);
        let d_at = r.offset();
        raw_params.push((d_at, read_payload(&mut r)?));
    }
    if r.offset() != bytes.len() as u64 {
        return Err(r.err_at(r.offset(), "trailing bytes after last layer"));
    }
    let mut g = ModelGraph::new(layers, input_shape, global_fsr)
        .map_err(|e| r.err_at(12, format!("inconsistent layers: {e}")))?;
    let shapes = g.infer_shapes()?;
    for (i, (at, payload)) in raw_params.into_iter().enumerate() {
        let bad = |msg: String| Error::Format { offset: at, msg: format!("layer {i}: {msg}") };
        g.params[i] = match (&g.params[i], payload) {
            (LayerParams::None, Payload::None) => LayerParams::None,
            (LayerParams::Weights(w), Payload::F32(v)) => {
                let shape = w.shape().to_vec();
                let t = Tensor::new(shape, v).map_err(|e| bad(e.to_string()))?;
                LayerParams::Weights(Weights::Real(t))
            }
            (LayerParams::Weights(w), Payload::Packed(codes, cfg)) => {
                let shape = w.shape().to_vec();
                let q = QTensor::new(shape, codes, cfg).map_err(|e| bad(e.to_string()))?;
                LayerParams::Weights(Weights::Quantized(q))
            }
            (LayerParams::BatchNorm(_), Payload::F32(v)) => {
                let c = shapes[i][0];
                if v.len() != 4 * c + 1 {
                    return Err(bad(format!("{} values for {c} channels, expected {}", v.len(), 4 * c + 1)));
                }
                LayerParams::BatchNorm(BatchNormParams {
                    gamma: v[..c].to_vec(),
                    beta: v[c..2 * c].to_vec(),
                    running_mean: v[2 * c..3 * c].to_vec(),
                    running_var: v[3 * c..4 * c].to_vec(),
                    eps: v[4 * c],
                })
            }
            _ => return Err(bad("payload type does not fit the layer kind".into())),
        };
    }
    g.validate().map_err(|e| r.err_at(0, e.to_string()))?;
    Ok(g)
}

enum Payload {
    None,
    F32(Vec<f32>),
    Packed(Vec<crate::lognum::LogCode>, QuantizerConfig),
}

fn read_payload(r: &mut Reader<'_>) -> Result<Payload> {
    let at = r.offset();
    match r.u8()? {
        tag::DTYPE_NONE => Ok(Payload::None),
        tag::DTYPE_F32 => {
            let n = r.u32()?;
            Ok(Payload::F32(r.f32s(n)?))
        }
        tag::DTYPE_PACKED => {
            let q_at = r.offset();
            let (q, fsr) = r.quant()?;
            let cfg = q
                .ok_or_else(|| r.err_at(q_at, "packed payload without a quantizer"))?
                .with_fsr(fsr);
            cfg.validate().map_err(|e| r.err_at(q_at, e.to_string()))?;
            let n = r.u32()?;
            let len = packed_len(n, cfg.bitwidth);
            let p_at = r.offset();
            let bytes = r.bytes(len)?;
            let codes = unpack_codes(&bytes, n, &cfg).map_err(|e| r.err_at(p_at, e.to_string()))?;
            Ok(Payload::Packed(codes, cfg))
        }
        t => Err(r.err_at(at, format!("unknown payload dtype tag {t}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parse_arch;
    use crate::tensor::quantize_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ModelGraph {
        let arch = "conv:2:3:1:1,bn,relu,logquant:4:-1,maxpool:2:2,fc:3,softmax";
        let mut g = ModelGraph::new(parse_arch(arch).unwrap(), [1, 4, 4], 3).unwrap();
        g.init_he_uniform(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let wq = QuantizerConfig::log(5, 0).signed();
        let q = quantize_tensor(&g.weights(5).unwrap().to_real(), &wq).unwrap();
        g.set_weights(5, Weights::Quantized(q)).unwrap();
        g.layers[0].quant = Some(QuantizerConfig::log(4, -1).signed().sqrt2());
        g
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let g = sample();
        let bytes = write_model(&g).unwrap();
        let back = read_model(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(write_model(&back).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = write_model(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"LOGN");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[3, 0]);
        assert_eq!(&bytes[8..10], &[7, 0]);
        assert_eq!(&bytes[10..14], &[1, 0, 0, 0]);
        assert_eq!(bytes[22], tag::CONV);
    }

    #[test]
    fn unknown_tags_name_their_offset() {
        let mut bytes = write_model(&sample()).unwrap();
        bytes[22] = 42;
        match read_model(&bytes) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 22);
                assert!(msg.contains("kind tag 42"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bytes = write_model(&sample()).unwrap();
        // conv: tag + 5 u32 + 7-byte quant block, then the dtype tag
        let dtype_at = 22 + 1 + 20 + QUANT_BLOCK_LEN;
        let mut bad = bytes.clone();
        bad[dtype_at] = 9;
        assert!(matches!(read_model(&bad), Err(Error::Format { offset, .. }) if offset == dtype_at as u64));
    }

    #[test]
    fn truncation_and_trailing_bytes_fail() {
        let bytes = write_model(&sample()).unwrap();
        for cut in [0, 3, 10, 30, bytes.len() - 1] {
            assert!(matches!(read_model(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_model(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let g = ModelGraph::new(parse_arch("fc:2").unwrap(), [3, 1, 1], 0).unwrap();
        let mut bytes = write_model(&g).unwrap();
        // fc: tag + u32 + quant block + dtype, then the count
        let count_at = 22 + 1 + 4 + QUANT_BLOCK_LEN + 1;
        assert_eq!(bytes[count_at], 6);
        bytes[count_at] = 5;
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(read_model(&bytes), Err(Error::Format { .. })));
    }
}
