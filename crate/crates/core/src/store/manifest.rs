use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Fc,
    Conv2d,
    Relu,
    Maxpool,
    Avgpool,
    /// Batch-norm folded with its scale layer: `z = a * y + b` per channel.
    BnScale,
}

impl LayerKind {
    /// Layers that carry a weight tensor.
    pub fn has_weight(self) -> bool {
        matches!(self, LayerKind::Fc | LayerKind::Conv2d | LayerKind::BnScale)
    }

    /// Layers whose weights are converted to ternary residual form.
    pub fn is_quantized(self) -> bool {
        matches!(self, LayerKind::Fc | LayerKind::Conv2d)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDecl {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_ref: Option<String>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub hyperparams: HyperParams,
}

fn is_default(h: &HyperParams) -> bool {
    *h == HyperParams::default()
}

impl LayerDecl {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            weight_ref: None,
            bias_ref: None,
            hyperparams: HyperParams::default(),
        }
    }

    pub fn stride(&self) -> usize {
        self.hyperparams.stride.unwrap_or(match self.kind {
            LayerKind::Maxpool | LayerKind::Avgpool => self.window(),
            _ => 1,
        })
    }

    pub fn pad(&self) -> usize {
        self.hyperparams.pad.unwrap_or(0)
    }

    pub fn window(&self) -> usize {
        self.hyperparams.window.unwrap_or(0)
    }
}

/// Ordered layer declarations plus the shape of the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDecl>,
}

impl ModelManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: ModelManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::invalid(format!("bad input_shape {:?}", self.input_shape)));
        }
        let mut seen = HashSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::invalid(format!("duplicate layer name {:?}", layer.name)));
            }
            if !layer.kind.has_weight() && layer.weight_ref.is_some() {
                return Err(Error::invalid(format!("layer {:?} cannot take a weight", layer.name)));
            }
            if !layer.kind.has_weight() && layer.bias_ref.is_some() {
                return Err(Error::invalid(format!("layer {:?} cannot take a bias", layer.name)));
            }
            if matches!(layer.kind, LayerKind::Maxpool | LayerKind::Avgpool) && layer.window() == 0 {
                return Err(Error::invalid(format!("pooling layer {:?} needs a window", layer.name)));
            }
            if layer.hyperparams.stride == Some(0) {
                return Err(Error::invalid(format!("layer {:?} has stride 0", layer.name)));
            }
        }
        Ok(())
    }

    /// Layers that get converted, in network order.
    pub fn quantized_layers(&self) -> impl Iterator<Item = &LayerDecl> {
        self.layers.iter().filter(|l| l.kind.is_quantized())
    }
}
