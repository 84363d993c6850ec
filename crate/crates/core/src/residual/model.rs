use serde::{Deserialize, Serialize};

use super::{reconstruct, QuantizedLayer};
use crate::error::{Error, Result};
use crate::store::{LayerParams, ModelManifest, Network, Tensor};

/// Settings a model was converted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub block_size: usize,
    pub max_levels: usize,
    pub schedule_mode: String,
    #[serde(default)]
    pub scales_8bit: bool,
}

/// A network whose fc/conv weights are held as ternary residual stacks.
/// Biases and folded batch-norm parameters stay full precision in `dense`,
/// named `<layer>.weight` / `<layer>.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub manifest: ModelManifest,
    pub layers: Vec<QuantizedLayer>,
    pub dense: Vec<Tensor>,
    pub provenance: Provenance,
}

impl QuantizedModel {
    pub fn empty(input_shape: Vec<usize>, provenance: Provenance) -> Self {
        Self {
            manifest: ModelManifest {
                input_shape,
                layers: Vec::new(),
            },
            layers: Vec::new(),
            dense: Vec::new(),
            provenance,
        }
    }

    /// Checks that there is exactly one quantized layer per fc/conv layer of
    /// the manifest, in order, and that every stack is well formed.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let expected: Vec<&str> = self.manifest.quantized_layers().map(|l| l.name.as_str()).collect();
        let got: Vec<&str> = self.layers.iter().map(|l| l.name.as_str()).collect();
        if expected != got {
            return Err(Error::invalid(format!(
                "quantized layers {got:?} do not match manifest layers {expected:?}"
            )));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&QuantizedLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn dense_tensor(&self, name: &str) -> Option<&Tensor> {
        self.dense.iter().find(|t| t.name() == name)
    }

    pub fn total_levels(&self) -> usize {
        self.layers.iter().map(QuantizedLayer::total_levels).sum()
    }

    pub fn base_blocks(&self) -> usize {
        self.layers.iter().map(QuantizedLayer::base_blocks).sum()
    }

    /// Total levels divided by base block count (1.0 for an empty model).
    pub fn blocks_factor(&self) -> f64 {
        let base = self.base_blocks();
        if base == 0 {
            1.0
        } else {
            self.total_levels() as f64 / base as f64
        }
    }

    /// The full-precision network obtained by reconstructing every quantized
    /// weight.
    pub fn reconstruct_network(&self) -> Result<Network> {
        let params = self
            .manifest
            .layers
            .iter()
            .map(|decl| {
                let weight = if decl.kind.is_quantized() {
                    let layer = self
                        .layer(&decl.name)
                        .ok_or_else(|| Error::invalid(format!("no quantized layer for {:?}", decl.name)))?;
                    Some(reconstruct(layer).with_name(format!("{}.weight", decl.name)))
                } else if decl.kind.has_weight() {
                    Some(self.required_dense(&format!("{}.weight", decl.name))?.clone())
                } else {
                    None
                };
                let bias = self.dense_tensor(&format!("{}.bias", decl.name)).cloned();
                Ok(LayerParams { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(self.manifest.clone(), params)
    }

    fn required_dense(&self, name: &str) -> Result<&Tensor> {
        self.dense_tensor(name)
            .ok_or_else(|| Error::invalid(format!("container lacks dense tensor {name:?}")))
    }
}
