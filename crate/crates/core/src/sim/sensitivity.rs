use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::forward::forward;
use crate::error::{Error, Result};
use crate::store::{diff_norm_sq, norm_sq, Network, Tensor};

/// Final-output perturbation when the same relative weight noise is injected
/// into the first versus the last quantizable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSensitivity {
    pub epsilon: f64,
    pub first_layer: String,
    pub last_layer: String,
    pub delta_first: f64,
    pub delta_last: f64,
}

/// `w` plus gaussian noise rescaled so that `‖w' - w‖ / ‖w‖ = epsilon`.
pub fn inject_noise(w: &Tensor, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    let noise: Vec<f64> = (0..w.len()).map(|_| rng.sample(StandardNormal)).collect();
    let noise_norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if noise_norm == 0.0 {
        0.0
    } else {
        epsilon * w.norm_sq().sqrt() / noise_norm
    };
    let data = w
        .data()
        .iter()
        .zip(&noise)
        .map(|(&v, n)| (f64::from(v) + n * scale) as f32)
        .collect();
    Tensor::new(w.name(), w.shape().to_vec(), data)
}

fn pooled_delta(net: &Network, noisy: &Network, inputs: &[Tensor]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for x in inputs {
        let clean = forward(net, x)?;
        let pert = forward(noisy, x)?;
        num += diff_norm_sq(clean.logits(), pert.logits());
        den += norm_sq(clean.logits());
    }
    Ok(if num == 0.0 { 0.0 } else { (num / den).sqrt() })
}

pub fn depth_sensitivity(net: &Network, inputs: &[Tensor], epsilon: f64, seed: u64) -> Result<DepthSensitivity> {
    if inputs.is_empty() {
        return Err(Error::invalid("empty input batch"));
    }
    let quantized: Vec<usize> = (0..net.layers().len())
        .filter(|&i| net.layers()[i].kind.is_quantized())
        .collect();
    let (&first, &last) = match (quantized.first(), quantized.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::invalid("network has no fc/conv layer")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta_at = |i: usize| -> Result<f64> {
        let noisy_w = inject_noise(net.weight(i).expect("quantized layers have weights"), epsilon, &mut rng)?;
        pooled_delta(net, &net.with_weight(i, noisy_w)?, inputs)
    };
    let delta_first = delta_at(first)?;
    let delta_last = delta_at(last)?;
    Ok(DepthSensitivity {
        epsilon,
        first_layer: net.layers()[first].name.clone(),
        last_layer: net.layers()[last].name.clone(),
        delta_first,
        delta_last,
    })
}
