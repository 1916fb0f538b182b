//! Binary checkpoint of a finalized quantized model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "QCKP" | version u32 | bits u8 | arch 6×u32 | param count u32
//! per param: kind u8 (0 quantized, 1 float) | name len u16 | name utf-8
//!            | ndim u8 | dims ndim×u32
//!            | quantized: scale f64 | codes n×i8
//!            | float:     values n×f64
//! metrics len u32 | metrics JSON
//! crc32 u32 over every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRecord};
use crate::model::Architecture;
use crate::quantizer::{QuantizedLayer, QuantizedParam, QuantizedWeights, MAX_BITS, MIN_BITS};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedCheckpoint {
    pub arch: Architecture,
    pub bits: u8,
    pub weights: QuantizedWeights,
    pub metrics: Vec<MetricsRecord>,
}

impl QuantizedCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.bits);
        let a = &self.arch;
        for v in [
            a.in_channels,
            a.height,
            a.width,
            a.classes,
            a.conv1_channels,
            a.conv2_channels,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.weights.params.len() as u32).to_le_bytes());
        for p in &self.weights.params {
            let (kind, shape) = match p {
                QuantizedParam::Quantized { layer, .. } => (0u8, layer.shape.as_slice()),
                QuantizedParam::Float { tensor, .. } => (1u8, tensor.shape()),
            };
            out.push(kind);
            let name = p.name().as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match p {
                QuantizedParam::Quantized { layer, .. } => {
                    out.extend_from_slice(&layer.scale.to_le_bytes());
                    out.extend(layer.codes.iter().map(|&c| c as u8));
                }
                QuantizedParam::Float { tensor, .. } => {
                    out.extend_from_slice(&tensor.to_le_bytes())
                }
            }
        }
        let blob = serde_json::to_vec(&self.metrics).expect("metrics serialize");
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "missing QCKP magic".into(),
            });
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if found != VERSION {
            return Err(Error::Version {
                found,
                expected: VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: "truncated checkpoint".into(),
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let bits = r.u8()?;
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(r.error(format!("bit width {bits} outside {MIN_BITS}..={MAX_BITS}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let arch = Architecture {
            in_channels: dims[0],
            height: dims[1],
            width: dims[2],
            classes: dims[3],
            conv1_channels: dims[4],
            conv2_channels: dims[5],
        };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let kind = r.u8()?;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error("parameter name is not utf-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            match kind {
                0 => {
                    let scale = r.f64()?;
                    let codes = r.take(n)?.iter().map(|&b| b as i8).collect();
                    params.push(QuantizedParam::Quantized {
                        name,
                        layer: QuantizedLayer {
                            shape,
                            scale,
                            codes,
                        },
                    });
                }
                1 => {
                    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                    params.push(QuantizedParam::Float {
                        name,
                        tensor: Tensor::new(shape, data)?,
                    });
                }
                k => return Err(r.error(format!("unknown parameter kind {k}"))),
            }
        }
        let blob_len = r.u32()? as usize;
        let metrics = serde_json::from_slice(r.take(blob_len)?)?;
        if r.pos != body.len() {
            return Err(r.error("trailing bytes before checksum".into()));
        }
        let ck = Self {
            arch,
            bits,
            weights: QuantizedWeights { params },
            metrics,
        };
        arch.check_weights(&ck.weights.dequantize())?;
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn eval_accuracy(&self, data: &Dataset) -> Result<f64> {
        metrics::eval_accuracy(&self.arch, &self.weights.dequantize(), data)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, message: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!("truncated: need {n} bytes")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
