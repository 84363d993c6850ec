use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::store::manifest::{LayerDecl, LayerKind, ModelManifest};
use crate::store::{npy, Tensor};

/// Weight and bias of one layer; both absent for non-parametric layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// A full-precision network: manifest plus every referenced tensor, with
/// shapes checked against the layer kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    manifest: ModelManifest,
    params: Vec<LayerParams>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(manifest: ModelManifest, params: Vec<LayerParams>) -> Result<Self> {
        manifest.validate()?;
        if params.len() != manifest.layers.len() {
            return Err(Error::invalid(format!(
                "{} layers declared, {} parameter sets given",
                manifest.layers.len(),
                params.len()
            )));
        }
        for (decl, p) in manifest.layers.iter().zip(&params) {
            if decl.kind.has_weight() != p.weight.is_some() {
                return Err(Error::invalid(format!(
                    "layer {:?}: weight presence does not match kind",
                    decl.name
                )));
            }
            if !decl.kind.has_weight() && p.bias.is_some() {
                return Err(Error::invalid(format!("layer {:?} cannot take a bias", decl.name)));
            }
        }
        let shapes = infer_shapes(&manifest, |i| {
            (
                params[i].weight.as_ref().map(|t| t.shape().to_vec()),
                params[i].bias.as_ref().map(|t| t.shape().to_vec()),
            )
        })?;
        Ok(Self {
            manifest,
            params,
            shapes,
        })
    }

    /// Loads a manifest and its tensors; relative refs resolve against the
    /// manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = ModelManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |r: &str| -> PathBuf {
            let p = Path::new(r);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let params = manifest
            .layers
            .iter()
            .map(|decl| -> Result<LayerParams> {
                if decl.kind.has_weight() && decl.weight_ref.is_none() {
                    return Err(Error::invalid(format!("layer {:?} needs a weight_ref", decl.name)));
                }
                let weight = decl
                    .weight_ref
                    .as_deref()
                    .map(|r| npy::load_tensor(resolve(r)).map(|t| t.with_name(format!("{}.weight", decl.name))))
                    .transpose()?;
                let bias = decl
                    .bias_ref
                    .as_deref()
                    .map(|r| npy::load_tensor(resolve(r)).map(|t| t.with_name(format!("{}.bias", decl.name))))
                    .transpose()?;
                Ok(LayerParams { weight, bias })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, params)
    }

    /// Writes the manifest and one NPY file per tensor into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, manifest_name: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = self.manifest.clone();
        for (decl, p) in manifest.layers.iter_mut().zip(&self.params) {
            if let Some(w) = &p.weight {
                let file = format!("{}.weight.npy", decl.name);
                npy::save_tensor(w, dir.join(&file))?;
                decl.weight_ref = Some(file);
            }
            if let Some(b) = &p.bias {
                let file = format!("{}.bias.npy", decl.name);
                npy::save_tensor(b, dir.join(&file))?;
                decl.bias_ref = Some(file);
            }
        }
        let path = dir.join(manifest_name);
        std::fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn layers(&self) -> &[LayerDecl] {
        &self.manifest.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.manifest.input_shape
    }

    /// Output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.manifest.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn weight(&self, i: usize) -> Option<&Tensor> {
        self.params[i].weight.as_ref()
    }

    pub fn bias(&self, i: usize) -> Option<&Tensor> {
        self.params[i].bias.as_ref()
    }

    /// Returns a copy with the weight of `layer` replaced (same shape required).
    pub fn with_weight(&self, layer: usize, weight: Tensor) -> Result<Self> {
        let old = self.params[layer]
            .weight
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("layer {layer} has no weight")))?;
        if old.shape() != weight.shape() {
            return Err(Error::ShapeMismatch(format!(
                "layer {:?}: weight {:?} cannot replace {:?}",
                self.manifest.layers[layer].name,
                weight.shape(),
                old.shape()
            )));
        }
        let mut out = self.clone();
        out.params[layer].weight = Some(weight.with_name(old.name().to_string()));
        Ok(out)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.manifest.layers.iter().position(|l| l.name == name)
    }
}

/// Propagates shapes through the manifest. `param_shapes(i)` yields the
/// (weight, bias) shapes of layer `i`. Returns each layer's output shape.
pub fn infer_shapes(
    manifest: &ModelManifest,
    param_shapes: impl Fn(usize) -> (Option<Vec<usize>>, Option<Vec<usize>>),
) -> Result<Vec<Vec<usize>>> {
    let mut current = manifest.input_shape.clone();
    let mut out = Vec::with_capacity(manifest.layers.len());
    for (i, decl) in manifest.layers.iter().enumerate() {
        let (w, b) = param_shapes(i);
        current = layer_output_shape(decl, &current, w.as_deref(), b.as_deref())?;
        out.push(current.clone());
    }
    Ok(out)
}

fn layer_output_shape(
    decl: &LayerDecl,
    input: &[usize],
    weight: Option<&[usize]>,
    bias: Option<&[usize]>,
) -> Result<Vec<usize>> {
    let name = &decl.name;
    let mismatch = |msg: String| Error::InvalidArgument(format!("layer {name:?}: {msg}"));
    let numel: usize = input.iter().product();
    match decl.kind {
        LayerKind::Fc => {
            let w = weight.ok_or_else(|| mismatch("missing weight".into()))?;
            let [out_f, in_f] = w else {
                return Err(mismatch(format!("fc weight must be 2-D, got {w:?}")));
            };
            if *in_f != numel {
                return Err(mismatch(format!("fc expects {in_f} inputs, receives {input:?}")));
            }
            check_bias(bias, *out_f).map_err(mismatch)?;
            Ok(vec![*out_f])
        }
        LayerKind::Conv2d => {
            let w = weight.ok_or_else(|| mismatch("missing weight".into()))?;
            let [c_out, c_in, kh, kw] = w else {
                return Err(mismatch(format!("conv2d weight must be 4-D, got {w:?}")));
            };
            let [c, h, wd] = input else {
                return Err(mismatch(format!("conv2d input must be [C, H, W], got {input:?}")));
            };
            if c != c_in {
                return Err(mismatch(format!("weight expects {c_in} input channels, receives {c}")));
            }
            if let Some(ch) = decl.hyperparams.channels {
                if ch != *c_out {
                    return Err(mismatch(format!("declared {ch} channels, weight has {c_out}")));
                }
            }
            check_bias(bias, *c_out).map_err(mismatch)?;
            let (s, p) = (decl.stride(), decl.pad());
            let oh = conv_extent(*h, *kh, s, p).ok_or_else(|| mismatch("kernel larger than padded input".into()))?;
            let ow = conv_extent(*wd, *kw, s, p).ok_or_else(|| mismatch("kernel larger than padded input".into()))?;
            Ok(vec![*c_out, oh, ow])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::Maxpool | LayerKind::Avgpool => {
            let [c, h, wd] = input else {
                return Err(mismatch(format!("pooling input must be [C, H, W], got {input:?}")));
            };
            let (k, s) = (decl.window(), decl.stride());
            let oh = conv_extent(*h, k, s, 0).ok_or_else(|| mismatch("window larger than input".into()))?;
            let ow = conv_extent(*wd, k, s, 0).ok_or_else(|| mismatch("window larger than input".into()))?;
            Ok(vec![*c, oh, ow])
        }
        LayerKind::BnScale => {
            let w = weight.ok_or_else(|| mismatch("missing scale".into()))?;
            let channels = input[0];
            if w != [channels] {
                return Err(mismatch(format!("scale must have shape [{channels}], got {w:?}")));
            }
            check_bias(bias, channels).map_err(mismatch)?;
            Ok(input.to_vec())
        }
    }
}

fn check_bias(bias: Option<&[usize]>, len: usize) -> std::result::Result<(), String> {
    match bias {
        Some(b) if b != [len] => Err(format!("bias must have shape [{len}], got {b:?}")),
        _ => Ok(()),
    }
}

pub(crate) fn conv_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}
