//! On-disk format for quantized models.
//!
//! ```text
//! magic      8 bytes  "TERNRES\n"
//! index_len  u64 LE
//! index      JSON (UTF-8), `index_len` bytes
//! blob       binary payload, `blob_len` bytes
//! ```
//!
//! Scales and thresholds are consecutive little-endian f32. Signs take two
//! bits per weight, first weight in the lowest bits of a byte:
//! `00 → 0`, `01 → +1`, `10 → −1`, `11` is reserved and rejected. Every
//! level's signs start on a fresh byte; padding bits are zero.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residual::{BlockStack, Provenance, QuantizedLayer, QuantizedModel};
use crate::store::{partition_len, ModelManifest, Tensor};
use crate::ternary::TernaryLevel;

pub const CONTAINER_MAGIC: &[u8; 8] = b"TERNRES\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    manifest: ModelManifest,
    provenance: Provenance,
    layers: Vec<LayerIndex>,
    dense: Vec<DenseIndex>,
    blob_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerIndex {
    name: String,
    shape: Vec<usize>,
    #[serde(rename = "N")]
    block_size: usize,
    levels_per_block: Vec<usize>,
    scale_offsets: Vec<u64>,
    threshold_offsets: Vec<u64>,
    sign_offsets: Vec<u64>,
    delta: f64,
    epsilon_sq: f64,
    weight_norm_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale_exponent: Option<i32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenseIndex {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Packs signs two bits apiece, little-endian within each byte.
pub fn pack_signs(signs: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; signs.len().div_ceil(4)];
    for (i, &s) in signs.iter().enumerate() {
        let code = match s {
            0 => 0b00,
            1 => 0b01,
            -1 => 0b10,
            other => panic!("sign {other} outside {{-1, 0, 1}}"),
        };
        out[i / 4] |= code << (2 * (i % 4));
    }
    out
}

pub fn unpack_signs(bytes: &[u8], len: usize) -> Result<Vec<i8>> {
    if bytes.len() != len.div_ceil(4) {
        return Err(Error::format(format!(
            "{} sign bytes cannot hold {len} signs",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(len);
    for i in 0..bytes.len() * 4 {
        let code = (bytes[i / 4] >> (2 * (i % 4))) & 0b11;
        if i >= len {
            if code != 0 {
                return Err(Error::format("non-zero sign padding"));
            }
            continue;
        }
        out.push(match code {
            0b00 => 0,
            0b01 => 1,
            0b10 => -1,
            _ => return Err(Error::format("reserved sign code 11")),
        });
    }
    Ok(out)
}

pub fn encode_quantized(model: &QuantizedModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut idx = LayerIndex {
            name: layer.name.clone(),
            shape: layer.shape.clone(),
            block_size: layer.block_size,
            levels_per_block: layer.stacks.iter().map(|s| s.levels.len()).collect(),
            scale_offsets: Vec::with_capacity(layer.stacks.len()),
            threshold_offsets: Vec::with_capacity(layer.stacks.len()),
            sign_offsets: Vec::with_capacity(layer.stacks.len()),
            delta: layer.delta,
            epsilon_sq: layer.epsilon_sq,
            weight_norm_sq: layer.weight_norm_sq,
            scale_exponent: layer.scale_exponent,
        };
        for stack in &layer.stacks {
            idx.scale_offsets.push(blob.len() as u64);
            for level in &stack.levels {
                blob.extend_from_slice(&level.alpha.to_le_bytes());
            }
            idx.threshold_offsets.push(blob.len() as u64);
            for level in &stack.levels {
                blob.extend_from_slice(&level.threshold.to_le_bytes());
            }
            idx.sign_offsets.push(blob.len() as u64);
            for level in &stack.levels {
                blob.extend(pack_signs(&level.signs));
            }
        }
        layers.push(idx);
    }
    let mut dense = Vec::with_capacity(model.dense.len());
    for t in &model.dense {
        dense.push(DenseIndex {
            name: t.name().to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = Index {
        format_version: FORMAT_VERSION,
        manifest: model.manifest.clone(),
        provenance: model.provenance.clone(),
        layers,
        dense,
        blob_len: blob.len() as u64,
    };
    let index_bytes = serde_json::to_vec(&index)?;
    let mut out = Vec::with_capacity(16 + index_bytes.len() + blob.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(index_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&index_bytes);
    out.extend_from_slice(&blob);
    Ok(out)
}

struct Blob<'a>(&'a [u8]);

impl Blob<'_> {
    fn slice(&self, offset: u64, len: usize) -> Result<&[u8]> {
        let start = usize::try_from(offset).map_err(|_| Error::format("offset overflow"))?;
        self.0
            .get(start..start.checked_add(len).ok_or_else(|| Error::format("offset overflow"))?)
            .ok_or_else(|| Error::format(format!("payload truncated: need bytes {start}..{}", start + len)))
    }

    fn f32s(&self, offset: u64, count: usize) -> Result<Vec<f32>> {
        Ok(self
            .slice(offset, count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    if bytes.len() < 16 || &bytes[..8] != CONTAINER_MAGIC {
        return Err(Error::format("not a quantized model container"));
    }
    let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let index_bytes = bytes
        .get(16..16usize.saturating_add(index_len))
        .ok_or_else(|| Error::format("index truncated"))?;
    let index: Index = serde_json::from_slice(index_bytes).map_err(|e| Error::format(format!("bad index: {e}")))?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            index.format_version
        )));
    }
    let blob_bytes = &bytes[16 + index_len..];
    if blob_bytes.len() as u64 != index.blob_len {
        return Err(Error::format(format!(
            "payload holds {} bytes, index declares {}",
            blob_bytes.len(),
            index.blob_len
        )));
    }
    let blob = Blob(blob_bytes);

    let mut layers = Vec::with_capacity(index.layers.len());
    for li in index.layers {
        let numel: usize = li.shape.iter().product();
        let blocks = partition_len(&li.name, numel, li.block_size).map_err(|e| Error::format(e.to_string()))?;
        let k = blocks.len();
        if [
            li.levels_per_block.len(),
            li.scale_offsets.len(),
            li.threshold_offsets.len(),
            li.sign_offsets.len(),
        ]
        .iter()
        .any(|&n| n != k)
        {
            return Err(Error::format(format!(
                "layer {:?}: per-block tables disagree with {k} blocks",
                li.name
            )));
        }
        let mut stacks = Vec::with_capacity(k);
        for (b, block) in blocks.into_iter().enumerate() {
            let count = li.levels_per_block[b];
            let alphas = blob.f32s(li.scale_offsets[b], count)?;
            let thresholds = blob.f32s(li.threshold_offsets[b], count)?;
            let stride = block.len.div_ceil(4);
            let mut levels = Vec::with_capacity(count);
            for (t, (alpha, threshold)) in alphas.into_iter().zip(thresholds).enumerate() {
                let bytes = blob.slice(li.sign_offsets[b] + (t * stride) as u64, stride)?;
                levels.push(TernaryLevel {
                    alpha,
                    signs: unpack_signs(bytes, block.len)?,
                    threshold,
                });
            }
            stacks.push(BlockStack { block, levels });
        }
        layers.push(QuantizedLayer {
            name: li.name,
            shape: li.shape,
            block_size: li.block_size,
            stacks,
            delta: li.delta,
            epsilon_sq: li.epsilon_sq,
            weight_norm_sq: li.weight_norm_sq,
            scale_exponent: li.scale_exponent,
        });
    }
    let dense = index
        .dense
        .into_iter()
        .map(|d| {
            let numel = d.shape.iter().product();
            let data = blob.f32s(d.offset, numel)?;
            Tensor::new(d.name, d.shape, data).map_err(|e| Error::format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let model = QuantizedModel {
        manifest: index.manifest,
        layers,
        dense,
        provenance: index.provenance,
    };
    model.validate().map_err(|e| match e {
        Error::Format(m) => Error::Format(m),
        other => Error::Format(other.to_string()),
    })?;
    Ok(model)
}

pub fn save_quantized(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_quantized(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_quantized(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn provenance() -> Provenance {
        Provenance {
            block_size: 64,
            max_levels: 16,
            schedule_mode: "uniform".into(),
            scales_8bit: false,
        }
    }

    #[test]
    fn sign_byte_layout() {
        assert_eq!(pack_signs(&[1, 0, -1, 0]), vec![0b00_10_00_01]);
        assert_eq!(pack_signs(&[-1, -1, 1]), vec![0b00_01_10_10]);
        assert_eq!(unpack_signs(&[0b00_10_00_01], 4).unwrap(), vec![1, 0, -1, 0]);
    }

    #[test]
    fn rejects_reserved_and_padding() {
        assert!(unpack_signs(&[0b11], 1).is_err());
        assert!(unpack_signs(&[0b01_00_00_00], 3).is_err());
        assert!(unpack_signs(&[0, 0], 4).is_err());
    }

    #[test]
    fn empty_model_roundtrips() {
        let m = QuantizedModel::empty(vec![3], provenance());
        let bytes = encode_quantized(&m).unwrap();
        assert_eq!(decode_quantized(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_version_and_truncation() {
        let m = QuantizedModel::empty(vec![3], provenance());
        let bytes = encode_quantized(&m).unwrap();
        let text = String::from_utf8_lossy(&bytes[16..]).replace("\"format_version\":1", "\"format_version\":2");
        let mut bumped = bytes[..16].to_vec();
        bumped.extend_from_slice(text.as_bytes());
        assert!(matches!(decode_quantized(&bumped), Err(Error::Format(m)) if m.contains("version")));
        assert!(decode_quantized(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_quantized(b"TERNRES\n").is_err());
        assert!(decode_quantized(b"garbage garbage garbage").is_err());
    }

    proptest! {
        #[test]
        fn signs_roundtrip(signs in prop::collection::vec(-1i8..=1, 0..100)) {
            prop_assert_eq!(unpack_signs(&pack_signs(&signs), signs.len()).unwrap(), signs);
        }
    }
}
