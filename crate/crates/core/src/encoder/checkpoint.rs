//! JSON checkpoints: base64 little-endian f64 buffers per named parameter,
//! bit-packed masks, the encoder config and the run seed.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, Mask};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "prunekit-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format: String,
    version: u32,
    seed: u64,
    config: EncoderConfig,
    parameters: Vec<BufferDoc>,
    masks: Vec<MaskDoc>,
    references: Vec<BufferDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BufferDoc {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskDoc {
    name: String,
    shape: Vec<usize>,
    bits: String,
}

fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64(s: &str, expected: usize, name: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("{name}: {e}")))?;
    if bytes.len() != expected * 8 {
        bail!(
            Format,
            "{name}: {} bytes for {} values",
            bytes.len(),
            expected
        );
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// LSB-first within each byte.
fn pack_bits(bits: &[bool]) -> String {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    B64.encode(bytes)
}

fn unpack_bits(s: &str, n: usize, name: &str) -> Result<Vec<bool>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("{name}: {e}")))?;
    if bytes.len() != n.div_ceil(8) {
        bail!(Format, "{name}: {} mask bytes for {} bits", bytes.len(), n);
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

fn buffer(name: String, t: &Tensor) -> BufferDoc {
    BufferDoc {
        name,
        shape: t.shape().to_vec(),
        data: encode_f64(t.data()),
    }
}

impl Encoder {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let parameters = self
            .param_ids()
            .into_iter()
            .map(|id| buffer(self.param_name(id), self.param(id)))
            .collect();
        let masks = self
            .layers
            .iter()
            .map(|l| MaskDoc {
                name: l.name(),
                shape: vec![l.mask.rows, l.mask.cols],
                bits: pack_bits(l.mask.bits()),
            })
            .collect();
        let references = self
            .layers
            .iter()
            .filter_map(|l| l.ref_weight().map(|r| buffer(l.name(), r)))
            .collect();
        let doc = CheckpointDoc {
            format: FORMAT.into(),
            version: VERSION,
            seed: self.seed,
            config: self.config.clone(),
            parameters,
            masks,
            references,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if doc.format != FORMAT || doc.version != VERSION {
            bail!(
                Format,
                "unsupported checkpoint {} v{}",
                doc.format,
                doc.version
            );
        }
        let mut model = Encoder::new(doc.config, doc.seed)?;
        let ids = model.param_ids();
        if doc.parameters.len() != ids.len() {
            bail!(
                Format,
                "{} parameters, expected {}",
                doc.parameters.len(),
                ids.len()
            );
        }
        for (id, buf) in ids.into_iter().zip(&doc.parameters) {
            let name = model.param_name(id);
            let target = model.param_mut(id);
            if buf.name != name || buf.shape != target.shape() {
                bail!(
                    Format,
                    "parameter {} {:?} where {} {:?} expected",
                    buf.name,
                    buf.shape,
                    name,
                    target.shape()
                );
            }
            let data = decode_f64(&buf.data, target.numel(), &name)?;
            target.data_mut().copy_from_slice(&data);
        }
        if doc.masks.len() != model.layers.len() {
            bail!(
                Format,
                "{} masks for {} layers",
                doc.masks.len(),
                model.layers.len()
            );
        }
        for (layer, m) in model.layers.iter_mut().zip(&doc.masks) {
            let (r, c) = (layer.weight.rows(), layer.weight.cols());
            if m.name != layer.name() || m.shape != [r, c] {
                bail!(
                    Format,
                    "mask {} does not match layer {}",
                    m.name,
                    layer.name()
                );
            }
            layer.mask = Mask::from_bits(r, c, unpack_bits(&m.bits, r * c, &m.name)?)?;
        }
        if !doc.references.is_empty() {
            if doc.references.len() != model.layers.len() {
                bail!(Format, "partial reference snapshot");
            }
            for (layer, buf) in model.layers.iter_mut().zip(&doc.references) {
                if buf.name != layer.name() || buf.shape != layer.weight.shape() {
                    bail!(
                        Format,
                        "reference {} does not match layer {}",
                        buf.name,
                        layer.name()
                    );
                }
                let data = decode_f64(&buf.data, layer.numel(), &buf.name)?;
                layer.set_ref_weight(Tensor::new(buf.shape.clone(), data)?);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}
