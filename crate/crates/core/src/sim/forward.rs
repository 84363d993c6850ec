use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::actquant::quantize_activations;
use super::ops;
use crate::error::{Error, Result};
use crate::residual::QuantizedModel;
use crate::store::{diff_norm_sq, norm_sq, LayerKind, Network, Tensor};

/// Largest relative gap tolerated between the dense and level-decomposed
/// evaluation of a quantized layer.
pub const PATH_AGREEMENT: f64 = 1e-5;

/// Activations of one forward pass: `activations[0]` is the input and
/// `activations[i + 1]` the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub activations: Vec<Vec<f32>>,
}

impl ForwardPass {
    pub fn logits(&self) -> &[f32] {
        self.activations.last().expect("input is always present")
    }
}

fn check_input(net: &Network, input: &[f32]) -> Result<()> {
    let expected: usize = net.input_shape().iter().product();
    if input.len() != expected {
        return Err(Error::invalid(format!(
            "network expects {expected} inputs (shape {:?}), got {}",
            net.input_shape(),
            input.len()
        )));
    }
    Ok(())
}

/// Full-precision reference pass.
pub fn forward(net: &Network, input: &Tensor) -> Result<ForwardPass> {
    check_input(net, input.data())?;
    let mut activations = vec![input.data().to_vec()];
    for i in 0..net.layers().len() {
        let next = ops::apply_layer(net, i, activations.last().expect("non-empty"));
        activations.push(next);
    }
    Ok(ForwardPass { activations })
}

/// Relative perturbations of one layer's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub layer: String,
    /// `‖X - X̃‖ / ‖X‖`
    pub delta: f64,
    /// `‖X̃ - X̂‖ / ‖X‖`
    pub gamma: f64,
    /// `‖W - W̃‖ / ‖W‖` of the layer producing this output (0 for the input
    /// and for layers that are not quantized).
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTrace {
    /// Entry 0 describes the network input; entry `i + 1` layer `i`.
    pub entries: Vec<TraceEntry>,
    pub y: Vec<f32>,
    pub y_hat: Vec<f32>,
}

impl PerturbationTrace {
    pub fn final_delta(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.delta)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Paired passes through the full-precision and quantized networks.
#[derive(Debug, Clone)]
pub struct QuantizedPass {
    /// `X_i`
    pub clean: Vec<Vec<f32>>,
    /// `X̃_i`: outputs of the quantized pipeline.
    pub perturbed: Vec<Vec<f32>>,
    /// `X̂_i`: `X̃_i` after activation quantization, i.e. what layer `i`
    /// consumes. Equal to `X̃_i` for the final output.
    pub quantized_inputs: Vec<Vec<f32>>,
    /// Largest relative dense-vs-decomposed gap seen over quantized layers.
    pub path_gap: f64,
    pub trace: PerturbationTrace,
}

fn ratio(num_sq: f64, den_sq: f64) -> f64 {
    if num_sq == 0.0 {
        0.0
    } else {
        (num_sq / den_sq).sqrt()
    }
}

/// Checks that `qmodel` describes the same architecture as `net`.
pub fn check_alignment(net: &Network, qmodel: &QuantizedModel) -> Result<()> {
    let ours = &net.manifest().layers;
    let theirs = &qmodel.manifest.layers;
    let same = ours.len() == theirs.len()
        && ours
            .iter()
            .zip(theirs)
            .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.hyperparams == b.hyperparams)
        && net.input_shape() == qmodel.manifest.input_shape.as_slice();
    if !same {
        return Err(Error::invalid(
            "quantized model does not match the reference architecture",
        ));
    }
    for q in &qmodel.layers {
        let idx = net
            .layer_index(&q.name)
            .ok_or_else(|| Error::invalid(format!("reference lacks layer {:?}", q.name)))?;
        let w = net
            .weight(idx)
            .ok_or_else(|| Error::invalid(format!("layer {:?} has no weight", q.name)))?;
        if w.shape() != q.shape.as_slice() {
            return Err(Error::invalid(format!(
                "layer {:?}: quantized shape {:?} vs reference {:?}",
                q.name,
                q.shape,
                w.shape()
            )));
        }
    }
    Ok(())
}

/// Runs `input` through `net` and through the quantized model, recording
/// `Δ_i`, `γ_i` and `ε_i` per layer. Quantized layers are evaluated twice,
/// densely with reconstructed weights and level by level with sign-gated
/// additions; the two must agree within [`PATH_AGREEMENT`].
pub fn forward_quantized(
    net: &Network,
    qmodel: &QuantizedModel,
    input: &Tensor,
    act_quant: bool,
) -> Result<QuantizedPass> {
    check_alignment(net, qmodel)?;
    let qnet = qmodel.reconstruct_network()?;
    forward_quantized_with(net, qmodel, &qnet, input, act_quant)
}

pub(crate) fn forward_quantized_with(
    net: &Network,
    qmodel: &QuantizedModel,
    qnet: &Network,
    input: &Tensor,
    act_quant: bool,
) -> Result<QuantizedPass> {
    let clean = forward(net, input)?.activations;
    let layers = net.layers();

    let mut perturbed = vec![input.data().to_vec()];
    let mut quantized_inputs = Vec::with_capacity(layers.len() + 1);
    let mut path_gap = 0.0f64;
    for (i, decl) in layers.iter().enumerate() {
        let x_tilde = perturbed.last().expect("non-empty");
        let x_hat = if act_quant {
            quantize_activations(x_tilde).0
        } else {
            x_tilde.clone()
        };
        let dense = ops::apply_layer(qnet, i, &x_hat);
        if decl.kind.is_quantized() {
            let q = qmodel.layer(&decl.name).expect("alignment checked");
            let bias = qnet.bias(i).map(Tensor::data);
            let split = match decl.kind {
                LayerKind::Fc => ops::fc_decomposed(q, bias, &x_hat),
                _ => ops::conv_decomposed(q, bias, &x_hat, qnet.layer_input_shape(i), decl, qnet.output_shape(i)),
            };
            let scale = norm_sq(&dense);
            let gap = if scale == 0.0 {
                diff_norm_sq(&dense, &split).sqrt()
            } else {
                (diff_norm_sq(&dense, &split) / scale).sqrt()
            };
            if gap > PATH_AGREEMENT {
                return Err(Error::PathMismatch {
                    layer: decl.name.clone(),
                    gap,
                });
            }
            path_gap = path_gap.max(gap);
        }
        quantized_inputs.push(x_hat);
        perturbed.push(dense);
    }
    quantized_inputs.push(perturbed.last().expect("non-empty").clone());

    let mut entries = Vec::with_capacity(clean.len());
    for i in 0..clean.len() {
        let den = norm_sq(&clean[i]);
        let epsilon = if i == 0 {
            0.0
        } else if layers[i - 1].kind.is_quantized() {
            let w = net.weight(i - 1).expect("quantized layers have weights");
            let wq = qnet.weight(i - 1).expect("quantized layers have weights");
            ratio(diff_norm_sq(w.data(), wq.data()), w.norm_sq())
        } else {
            0.0
        };
        entries.push(TraceEntry {
            layer: if i == 0 {
                "input".into()
            } else {
                layers[i - 1].name.clone()
            },
            delta: ratio(diff_norm_sq(&clean[i], &perturbed[i]), den),
            gamma: ratio(diff_norm_sq(&perturbed[i], &quantized_inputs[i]), den),
            epsilon,
        });
    }
    let trace = PerturbationTrace {
        entries,
        y: clean.last().expect("non-empty").clone(),
        y_hat: perturbed.last().expect("non-empty").clone(),
    };
    Ok(QuantizedPass {
        clean,
        perturbed,
        quantized_inputs,
        path_gap,
        trace,
    })
}

/// Per-layer perturbations pooled over a batch: every ratio uses Frobenius
/// norms over all inputs stacked together.
pub fn batch_trace(
    net: &Network,
    qmodel: &QuantizedModel,
    inputs: &[Tensor],
    act_quant: bool,
) -> Result<Vec<TraceEntry>> {
    check_alignment(net, qmodel)?;
    let qnet = qmodel.reconstruct_network()?;
    let depth = net.layers().len() + 1;
    let mut sums = vec![(0.0f64, 0.0f64, 0.0f64); depth];
    let passes = inputs
        .par_iter()
        .map(|input| forward_quantized_with(net, qmodel, &qnet, input, act_quant))
        .collect::<Result<Vec<_>>>()?;
    let mut template: Option<Vec<TraceEntry>> = None;
    for pass in passes {
        for (i, s) in sums.iter_mut().enumerate() {
            s.0 += norm_sq(&pass.clean[i]);
            s.1 += diff_norm_sq(&pass.clean[i], &pass.perturbed[i]);
            s.2 += diff_norm_sq(&pass.perturbed[i], &pass.quantized_inputs[i]);
        }
        template.get_or_insert(pass.trace.entries);
    }
    let template = template.ok_or_else(|| Error::invalid("empty input batch"))?;
    Ok(template
        .into_iter()
        .zip(sums)
        .map(|(e, (den, d, g))| TraceEntry {
            delta: ratio(d, den),
            gamma: ratio(g, den),
            ..e
        })
        .collect())
}

/// Logits of the deployed quantized model for each input, with both
/// evaluation paths cross-checked.
pub fn infer_batch(qmodel: &QuantizedModel, inputs: &[Tensor], act_quant: bool) -> Result<Vec<Vec<f32>>> {
    let qnet = qmodel.reconstruct_network()?;
    inputs
        .par_iter()
        .map(|x| Ok(forward_quantized_with(&qnet, qmodel, &qnet, x, act_quant)?.trace.y_hat))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::{convert_model, make_schedule, ScheduleSpec};
    use crate::store::{HyperParams, LayerDecl, LayerParams, ModelManifest};
    use crate::toy::{exact_ternary_network, random_inputs};

    fn single(decl: LayerDecl, input_shape: Vec<usize>, w: Tensor) -> Network {
        Network::new(
            ModelManifest {
                input_shape,
                layers: vec![decl],
            },
            vec![LayerParams {
                weight: Some(w),
                bias: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn identity_fc() {
        let mut eye = vec![0.0; 25];
        (0..5).for_each(|i| eye[i * 6] = 1.0);
        let net = single(
            LayerDecl::new("fc", LayerKind::Fc),
            vec![5],
            Tensor::new("w", vec![5, 5], eye).unwrap(),
        );
        let x = Tensor::from_vec("x", vec![1.5, -2.0, 0.0, 3.25, 7.0]).unwrap();
        assert_eq!(forward(&net, &x).unwrap().logits(), x.data());
        assert!(forward(&net, &Tensor::from_vec("x", vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn pointwise_conv_is_fc_per_pixel() {
        let w = crate::toy::gaussian_tensor("w", &[3, 2, 1, 1], 1.0, 4);
        let mut decl = LayerDecl::new("c", LayerKind::Conv2d);
        decl.hyperparams = HyperParams::default();
        let conv = single(decl, vec![2, 3, 3], w.clone());
        let x = crate::toy::gaussian_tensor("x", &[2, 3, 3], 1.0, 5);
        let y = forward(&conv, &x).unwrap();
        let fc_w = Tensor::new("w", vec![3, 2], w.data().to_vec()).unwrap();
        let fc = single(LayerDecl::new("f", LayerKind::Fc), vec![2], fc_w);
        for p in 0..9 {
            let pixel = Tensor::from_vec("p", vec![x.data()[p], x.data()[9 + p]]).unwrap();
            let out = forward(&fc, &pixel).unwrap();
            for c in 0..3 {
                assert_eq!(out.logits()[c], y.logits()[c * 9 + p]);
            }
        }
    }

    #[test]
    fn exact_weights_without_act_quant_add_no_noise() {
        let net = exact_ternary_network(0, 64);
        let s = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 0.01 }).unwrap();
        let q = convert_model(&net, 64, &s, 4).unwrap().model;
        for x in random_inputs(&net, 3, 9) {
            let pass = forward_quantized(&net, &q, &x, false).unwrap();
            assert!(
                pass.trace
                    .entries
                    .iter()
                    .all(|e| e.delta == 0.0 && e.gamma == 0.0 && e.epsilon == 0.0),
                "{:?}",
                pass.trace.entries
            );
            assert_eq!(pass.trace.y, pass.trace.y_hat);
        }
    }

    #[test]
    fn activation_noise_respects_step_bound() {
        let net = exact_ternary_network(1, 32);
        let s = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 0.01 }).unwrap();
        let q = convert_model(&net, 32, &s, 4).unwrap().model;
        let x = &random_inputs(&net, 1, 2)[0];
        let pass = forward_quantized(&net, &q, x, true).unwrap();
        for (i, e) in pass.trace.entries.iter().enumerate().take(pass.clean.len() - 1) {
            let x_tilde = &pass.perturbed[i];
            let (_, spec) = quantize_activations(x_tilde);
            let bound = spec.step() / 2.0 * (x_tilde.len() as f64).sqrt() / norm_sq(&pass.clean[i]).sqrt();
            assert!(e.gamma <= bound, "{}: {} > {}", e.layer, e.gamma, bound);
        }
        assert_eq!(pass.trace.entries[0].delta, 0.0);
        assert!(pass.trace.final_delta() > 0.0);
    }

    #[test]
    fn misaligned_model_is_rejected() {
        let net = exact_ternary_network(0, 64);
        let s = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 0.1 }).unwrap();
        let mut q = convert_model(&net, 64, &s, 4).unwrap().model;
        q.manifest.layers[2].name = "other".into();
        let x = &random_inputs(&net, 1, 0)[0];
        assert!(matches!(
            forward_quantized(&net, &q, x, false),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn trace_csv_has_header() {
        let trace = PerturbationTrace {
            entries: vec![TraceEntry {
                layer: "input".into(),
                delta: 0.0,
                gamma: 0.5,
                epsilon: 0.0,
            }],
            y: vec![],
            y_hat: vec![],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "layer,delta,gamma,epsilon\ninput,0.0,0.5,0.0\n"
        );
    }
}
