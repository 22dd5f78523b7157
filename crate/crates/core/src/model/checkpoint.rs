//! Binary checkpoint container.
//!
//! Layout: `"CFDR"`, version as u32 LE, a single-line UTF-8 JSON header
//! terminated by `\n`, then every record's raw little-endian bytes in the
//! order the header declares them. Parameter records are f32; quantized views
//! add one i8 record each. Extra JSON sections (e.g. a detection profile)
//! ride along in the header.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelMetadata, QuantizedLayerView};
use crate::error::{CfdrError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CFDR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    I8,
}

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Serialize, Deserialize)]
struct QuantRecord {
    layer: String,
    /// IEEE-754 bits of the scale, so the value survives JSON bit-exactly.
    scale_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    metadata: ModelMetadata,
    records: Vec<Record>,
    quant: Vec<QuantRecord>,
    #[serde(default)]
    extras: BTreeMap<String, serde_json::Value>,
}

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    save_checkpoint_with_extras(model, &BTreeMap::new())
}

pub fn save_checkpoint_with_extras(model: &Model, extras: &BTreeMap<String, serde_json::Value>) -> Vec<u8> {
    let mut records: Vec<Record> = model
        .params
        .iter()
        .map(|p| Record {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: Dtype::F32,
        })
        .collect();
    let mut quant = Vec::new();
    for view in model.quant.values() {
        records.push(Record {
            name: format!("{}.qweights", view.layer_name),
            shape: vec![view.qweights.len()],
            dtype: Dtype::I8,
        });
        quant.push(QuantRecord {
            layer: view.layer_name.clone(),
            scale_bits: view.scale.to_bits(),
        });
    }
    let header = Header {
        config: model.config.clone(),
        metadata: model.metadata.clone(),
        records,
        quant,
        extras: extras.clone(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for p in &model.params {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for view in model.quant.values() {
        out.extend(view.qweights.iter().map(|&q| q as u8));
    }
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model> {
    load_checkpoint_with_extras(bytes).map(|(m, _)| m)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CfdrError::Truncated {
                offset: self.bytes.len(),
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn load_checkpoint_with_extras(bytes: &[u8]) -> Result<(Model, BTreeMap<String, serde_json::Value>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CfdrError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CfdrError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let rest = &bytes[cur.pos..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or(CfdrError::Truncated {
        offset: bytes.len(),
        needed: 1,
    })?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| CfdrError::BadHeader(e.to_string()))?;
    cur.pos += nl + 1;

    let mut model = Model::build(header.config.clone())?;
    model.metadata = header.metadata;
    let mut scales: BTreeMap<&str, f32> = header
        .quant
        .iter()
        .map(|q| (q.layer.as_str(), f32::from_bits(q.scale_bits)))
        .collect();
    let mut param_iter = 0usize;
    for rec in &header.records {
        let n: usize = rec.shape.iter().product();
        match rec.dtype {
            Dtype::F32 => {
                let idx =
                    model.param_index(&rec.name).ok_or_else(|| CfdrError::BadHeader(format!("unknown parameter {}", rec.name)))?;
                if idx != param_iter {
                    return Err(CfdrError::BadHeader(format!("parameter {} out of declared order", rec.name)));
                }
                param_iter += 1;
                let p = &mut model.params[idx];
                if p.tensor.shape() != rec.shape.as_slice() {
                    return Err(CfdrError::BadHeader(format!(
                        "shape of {} is {:?}, model expects {:?}",
                        rec.name,
                        rec.shape,
                        p.tensor.shape()
                    )));
                }
                let raw = cur.take(n * 4)?;
                for (dst, chunk) in p.tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                    *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                }
            }
            Dtype::I8 => {
                let layer = rec
                    .name
                    .strip_suffix(".qweights")
                    .ok_or_else(|| CfdrError::BadHeader(format!("unexpected i8 record {}", rec.name)))?;
                let scale = scales
                    .remove(layer)
                    .ok_or_else(|| CfdrError::BadHeader(format!("no scale for {layer}")))?;
                let wi = model.weight_index(layer)?;
                if model.params[wi].numel() != n {
                    return Err(CfdrError::BadHeader(format!("qweights length mismatch for {layer}")));
                }
                let raw = cur.take(n)?;
                let view = QuantizedLayerView::from_parts(layer, scale, raw.iter().map(|&b| b as i8).collect());
                model.insert_view(view);
            }
        }
    }
    if param_iter != model.params.len() {
        return Err(CfdrError::BadHeader("checkpoint is missing parameters".into()));
    }
    if !scales.is_empty() {
        return Err(CfdrError::BadHeader("quantization scale without qweights record".into()));
    }
    if cur.pos != bytes.len() {
        return Err(CfdrError::BadHeader(format!(
            "{} trailing bytes after last record",
            bytes.len() - cur.pos
        )));
    }
    Ok((model, header.extras))
}
