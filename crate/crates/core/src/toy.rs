//! Seeded toy networks and inputs for tests and the `toy` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::store::{HyperParams, LayerDecl, LayerKind, LayerParams, ModelManifest, Network, Tensor};

/// Gaussian tensor with standard deviation `std`, reproducible from `seed`.
pub fn gaussian_tensor(name: &str, shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_with(&mut rng, name, shape, std)
}

fn gaussian_with(rng: &mut ChaCha8Rng, name: &str, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(name, shape.to_vec(), data).expect("finite gaussian samples")
}

fn decl(name: &str, kind: LayerKind, hp: HyperParams) -> LayerDecl {
    let mut d = LayerDecl::new(name, kind);
    d.hyperparams = hp;
    d
}

fn conv_hp(pad: usize) -> HyperParams {
    HyperParams {
        stride: Some(1),
        pad: Some(pad),
        ..HyperParams::default()
    }
}

fn pool_hp(window: usize) -> HyperParams {
    HyperParams {
        window: Some(window),
        ..HyperParams::default()
    }
}

/// The reference toy network:
///
/// ```text
/// input [2, 8, 8]
/// conv1 2->4 3x3 pad 1, bn1, relu1, pool1 max 2
/// conv2 4->8 3x3 pad 1, relu2, pool2 avg 2
/// fc1 32->16, relu3, fc2 16->10
/// ```
///
/// Weights are He-scaled gaussians; biases and batch-norm parameters are
/// small gaussians around 0 and 1.
pub fn toy_network(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        decl("conv1", LayerKind::Conv2d, conv_hp(1)),
        decl("bn1", LayerKind::BnScale, HyperParams::default()),
        decl("relu1", LayerKind::Relu, HyperParams::default()),
        decl("pool1", LayerKind::Maxpool, pool_hp(2)),
        decl("conv2", LayerKind::Conv2d, conv_hp(1)),
        decl("relu2", LayerKind::Relu, HyperParams::default()),
        decl("pool2", LayerKind::Avgpool, pool_hp(2)),
        decl("fc1", LayerKind::Fc, HyperParams::default()),
        decl("relu3", LayerKind::Relu, HyperParams::default()),
        decl("fc2", LayerKind::Fc, HyperParams::default()),
    ];
    let weight_shapes: [Option<Vec<usize>>; 10] = [
        Some(vec![4, 2, 3, 3]),
        Some(vec![4]),
        None,
        None,
        Some(vec![8, 4, 3, 3]),
        None,
        None,
        Some(vec![16, 32]),
        None,
        Some(vec![10, 16]),
    ];
    let params = layers
        .iter()
        .zip(weight_shapes)
        .map(|(d, shape)| match (d.kind, shape) {
            (LayerKind::BnScale, Some(s)) => {
                let mut a = gaussian_with(&mut rng, &format!("{}.weight", d.name), &s, 0.1);
                let shifted = a.data().iter().map(|v| v + 1.0).collect();
                a = Tensor::new(a.name(), s.clone(), shifted).expect("finite");
                let b = gaussian_with(&mut rng, &format!("{}.bias", d.name), &s, 0.1);
                LayerParams {
                    weight: Some(a),
                    bias: Some(b),
                }
            }
            (_, Some(s)) => {
                let fan_in: usize = s[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let w = gaussian_with(&mut rng, &format!("{}.weight", d.name), &s, std);
                let b = gaussian_with(&mut rng, &format!("{}.bias", d.name), &s[..1], 0.05);
                LayerParams {
                    weight: Some(w),
                    bias: Some(b),
                }
            }
            (_, None) => LayerParams::default(),
        })
        .collect();
    let manifest = ModelManifest {
        input_shape: vec![2, 8, 8],
        layers,
    };
    Network::new(manifest, params).expect("toy network is well formed")
}

/// The toy network with every fc/conv weight replaced by an exactly ternary
/// tensor: each `block_size` block holds values in `{-α, 0, α}` for one
/// power-of-two `α`, so a ternary conversion reproduces it without error.
pub fn exact_ternary_network(seed: u64, block_size: usize) -> Network {
    let mut net = toy_network(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_7e57);
    for i in 0..net.layers().len() {
        if !net.layers()[i].kind.is_quantized() {
            continue;
        }
        let w = net.weight(i).expect("quantized layers have weights");
        let data = w
            .data()
            .chunks(block_size.max(1))
            .flat_map(|chunk| {
                let alpha = 2f32.powi(-rng.random_range(1..=4));
                chunk
                    .iter()
                    .map(|&v| if v.abs() < 0.3 * alpha { 0.0 } else { alpha * v.signum() })
                    .collect::<Vec<_>>()
            })
            .collect();
        let exact = Tensor::new(w.name(), w.shape().to_vec(), data).expect("finite");
        net = net.with_weight(i, exact).expect("same shape");
    }
    net
}

/// `count` gaussian inputs shaped like the network input.
pub fn random_inputs(net: &Network, count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| gaussian_with(&mut rng, &format!("input{i}"), net.input_shape(), 1.0))
        .collect()
}
