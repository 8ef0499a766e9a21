//! Binary dataset and checkpoint files.
//!
//! Both share one container layout:
//!
//! ```text
//! magic        4 bytes   b"CQDS" (dataset) or b"CQCK" (checkpoint)
//! header_len   u32 LE    byte length of the JSON header
//! header       UTF-8 JSON, carries "format_version"
//! payload      little-endian records described below
//! ```
//!
//! Dataset payload, one record per image, train split first then val:
//!
//! ```text
//! n_objects    u32 LE
//! objects      n_objects * (class u32 LE, cx cy w h as 4 * f64 LE)
//! pixels       image_size * image_size * 3 f64 LE, row-major [y][x][rgb]
//! ```
//!
//! Checkpoint payload: for each layer in manifest order, the weight values
//! then the bias values (if any), all f64 LE in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::dataset::{DatasetSpec, Object, Sample, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{Layer, ParamSet};
use crate::quantizer::QuantConfig;

pub const DATASET_MAGIC: &[u8; 4] = b"CQDS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CQCK";
pub const FORMAT_VERSION: u32 = 1;

fn container(magic: &[u8; 4], header: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + h.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(payload);
    Ok(out)
}

fn open<'a, H: for<'de> Deserialize<'de>>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(H, Reader<'a>)> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header = serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    Ok((header, Reader { bytes: &bytes[8 + n..] }))
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("truncated payload".into()));
        }
        let (a, b) = self.bytes.split_at(n);
        self.bytes = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.bytes.len())))
        }
    }
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn check_version(v: u32) -> Result<()> {
    if v == FORMAT_VERSION {
        Ok(())
    } else {
        Err(Error::Format(format!("unsupported format_version {v}")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format_version: u32,
    spec: DatasetSpec,
    train: usize,
    val: usize,
}

/// A generated dataset together with the spec that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub val: Split,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let (train, val) = super::dataset::gen_dataset(spec)?;
        Ok(Dataset {
            spec: spec.clone(),
            train,
            val,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DatasetHeader {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            train: self.train.len(),
            val: self.val.len(),
        };
        let px = self.spec.image_size * self.spec.image_size * 3;
        let mut payload = Vec::with_capacity((self.train.len() + self.val.len()) * (px * 8 + 4 + 4 * 36));
        for s in self.train.iter().chain(&self.val) {
            payload.extend_from_slice(&(s.objects.len() as u32).to_le_bytes());
            for o in &s.objects {
                payload.extend_from_slice(&(o.class as u32).to_le_bytes());
                push_f64s(&mut payload, &o.bbox);
            }
            push_f64s(&mut payload, s.image.data());
        }
        container(DATASET_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, mut r): (DatasetHeader, _) = open(DATASET_MAGIC, bytes)?;
        check_version(h.format_version)?;
        h.spec.validate()?;
        let s = h.spec.image_size;
        let mut read_split = |n: usize| -> Result<Split> {
            (0..n)
                .map(|_| {
                    let k = r.u32()? as usize;
                    let mut objects = Vec::with_capacity(k);
                    for _ in 0..k {
                        let class = r.u32()? as usize;
                        let b = r.f64s(4)?;
                        objects.push(Object {
                            class,
                            bbox: [b[0], b[1], b[2], b[3]],
                        });
                    }
                    let image = Tensor::from_vec(&[s, s, 3], r.f64s(s * s * 3)?);
                    Ok(Sample { image, objects })
                })
                .collect()
        };
        let train = read_split(h.train)?;
        let val = read_split(h.val)?;
        r.finish()?;
        Ok(Dataset {
            spec: h.spec,
            train,
            val,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| missing(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::Missing(path.display().to_string())
    } else {
        Error::Io(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub bias_shape: Option<Vec<usize>>,
    pub exempt: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    model: ModelConfig,
    layers: Vec<LayerEntry>,
    quant: Option<QuantConfig>,
}

/// Model weights plus the configuration needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamSet,
    /// Bit-widths the weights are meant to be evaluated at, if quantized.
    pub quant: Option<QuantConfig>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layers = self
            .params
            .layers()
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                weight_shape: l.weight.shape().to_vec(),
                bias_shape: l.bias.as_ref().map(|b| b.shape().to_vec()),
                exempt: l.exempt,
            })
            .collect();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            layers,
            quant: self.quant.clone(),
        };
        let mut payload = Vec::with_capacity(self.params.num_params() * 8);
        for l in self.params.layers() {
            push_f64s(&mut payload, l.weight.data());
            if let Some(b) = &l.bias {
                push_f64s(&mut payload, b.data());
            }
        }
        container(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, mut r): (CheckpointHeader, _) = open(CHECKPOINT_MAGIC, bytes)?;
        check_version(h.format_version)?;
        let mut layers = Vec::with_capacity(h.layers.len());
        for e in h.layers {
            let n: usize = e.weight_shape.iter().product();
            let weight = Tensor::from_vec(&e.weight_shape, r.f64s(n)?);
            let bias = match &e.bias_shape {
                Some(s) => Some(Tensor::from_vec(s, r.f64s(s.iter().product())?)),
                None => None,
            };
            layers.push(Layer {
                name: e.name,
                weight,
                bias,
                exempt: e.exempt,
            });
        }
        r.finish()?;
        let params = ParamSet::new(layers)?;
        if let Some(q) = &h.quant {
            q.validate(&params)?;
        }
        Ok(Checkpoint {
            model: h.model,
            params,
            quant: h.quant,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| missing(path, e))?;
        Self::from_bytes(&bytes)
    }
}
