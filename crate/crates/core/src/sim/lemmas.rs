//! Per-layer perturbation bounds evaluated on concrete data.
//!
//! Every check compares a measured output difference (left side) with its
//! bound (right side). Outputs are recomputed in f64 from the f32 operands so
//! that storage rounding cannot manufacture a violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::forward::QuantizedPass;
use super::ops::ConvGeom;
use crate::error::{Error, Result};
use crate::store::{LayerDecl, LayerKind, Network};

/// Relative slack absorbing f64 summation order.
const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma {
    Relu,
    Maxpool,
    Avgpool,
    Matmul,
    Conv,
    BnScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lemma: Lemma,
    pub layer: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl LemmaCheck {
    fn new(lemma: Lemma, layer: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            lemma,
            layer: layer.to_owned(),
            lhs,
            rhs,
            holds: lhs <= rhs * (1.0 + SLACK) + f64::MIN_POSITIVE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub checks: Vec<LemmaCheck>,
}

impl LemmaReport {
    pub fn violations(&self) -> impl Iterator<Item = &LemmaCheck> {
        self.checks.iter().filter(|c| !c.holds)
    }

    pub fn violation_count(&self) -> usize {
        self.violations().count()
    }

    pub fn count(&self, lemma: Lemma) -> usize {
        self.checks.iter().filter(|c| c.lemma == lemma).count()
    }

    fn extend(&mut self, other: LemmaReport) {
        self.checks.extend(other.checks);
    }
}

fn norm(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f32], b: &[f32]) -> f64 {
    norm(a.iter().zip(b).map(|(&x, &y)| f64::from(x) - f64::from(y)))
}

fn check_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} elements", a.len(), b.len())));
    }
    Ok(())
}

/// `‖ReLU(x) - ReLU(x̂)‖ ≤ ‖x - x̂‖`.
pub fn relu_check(layer: &str, x: &[f32], x_hat: &[f32]) -> Result<LemmaCheck> {
    check_len(x, x_hat)?;
    let lhs = norm(
        x.iter()
            .zip(x_hat)
            .map(|(&a, &b)| f64::from(a.max(0.0)) - f64::from(b.max(0.0))),
    );
    Ok(LemmaCheck::new(Lemma::Relu, layer, lhs, diff_norm(x, x_hat)))
}

/// Pool windows as flat input indices.
fn windows(shape: &[usize], window: usize, stride: usize) -> Result<Vec<Vec<usize>>> {
    let &[c, h, w] = shape else {
        return Err(Error::ShapeMismatch(format!(
            "pooling expects [C, H, W], got {shape:?}"
        )));
    };
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::invalid(format!(
            "window {window} stride {stride} does not fit {shape:?}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(
                    (0..window)
                        .flat_map(|dy| (0..window).map(move |dx| (dy, dx)))
                        .map(|(dy, dx)| (ch * h + oy * stride + dy) * w + ox * stride + dx)
                        .collect(),
                );
            }
        }
    }
    Ok(out)
}

/// Per window, `|max(x) - max(x̂)| ≤ max |x - x̂|`. Returns the window with
/// the smallest slack.
pub fn maxpool_check(
    layer: &str,
    shape: &[usize],
    window: usize,
    stride: usize,
    x: &[f32],
    x_hat: &[f32],
) -> Result<Vec<LemmaCheck>> {
    check_len(x, x_hat)?;
    Ok(windows(shape, window, stride)?
        .iter()
        .map(|idx| {
            let m = idx.iter().map(|&i| f64::from(x[i])).fold(f64::NEG_INFINITY, f64::max);
            let m_hat = idx
                .iter()
                .map(|&i| f64::from(x_hat[i]))
                .fold(f64::NEG_INFINITY, f64::max);
            let bound = idx
                .iter()
                .map(|&i| (f64::from(x[i]) - f64::from(x_hat[i])).abs())
                .fold(0.0, f64::max);
            LemmaCheck::new(Lemma::Maxpool, layer, (m - m_hat).abs(), bound)
        })
        .collect())
}

/// Per window, `|avg(x) - avg(x̂)| ≤ ‖diff‖₁ / n ≤ ‖diff‖₂ / √n`. Both links
/// of the chain are recorded.
pub fn avgpool_check(
    layer: &str,
    shape: &[usize],
    window: usize,
    stride: usize,
    x: &[f32],
    x_hat: &[f32],
) -> Result<Vec<LemmaCheck>> {
    check_len(x, x_hat)?;
    let mut checks = Vec::new();
    for idx in windows(shape, window, stride)? {
        let n = idx.len() as f64;
        let d: Vec<f64> = idx.iter().map(|&i| f64::from(x[i]) - f64::from(x_hat[i])).collect();
        let lhs = (d.iter().sum::<f64>() / n).abs();
        let l1 = d.iter().map(|v| v.abs()).sum::<f64>() / n;
        let l2 = norm(d.iter().copied()) / n.sqrt();
        checks.push(LemmaCheck::new(Lemma::Avgpool, layer, lhs, l1));
        checks.push(LemmaCheck::new(Lemma::Avgpool, layer, l1, l2));
    }
    Ok(checks)
}

/// `‖Wx - W̃x̂‖ ≤ ‖W‖_F ‖x - x̂‖ + ‖x̂‖ ‖W - W̃‖_F` for an `[out, in]` matrix.
/// A bias shared by both sides cancels and is omitted.
pub fn matmul_check(
    layer: &str,
    shape: &[usize],
    w: &[f32],
    w_tilde: &[f32],
    x: &[f32],
    x_hat: &[f32],
) -> Result<LemmaCheck> {
    let &[out_f, in_f] = shape else {
        return Err(Error::ShapeMismatch(format!("matmul expects [out, in], got {shape:?}")));
    };
    check_len(w, w_tilde)?;
    check_len(x, x_hat)?;
    if w.len() != out_f * in_f || x.len() != in_f {
        return Err(Error::ShapeMismatch(format!(
            "weight {} / input {} do not match {shape:?}",
            w.len(),
            x.len()
        )));
    }
    let lhs = norm((0..out_f).map(|o| {
        let row = o * in_f..(o + 1) * in_f;
        w[row.clone()]
            .iter()
            .zip(&w_tilde[row])
            .zip(x.iter().zip(x_hat))
            .map(|((&a, &at), (&b, &bh))| f64::from(a) * f64::from(b) - f64::from(at) * f64::from(bh))
            .sum::<f64>()
    }));
    let rhs = norm(w.iter().map(|&v| f64::from(v))) * diff_norm(x, x_hat)
        + norm(x_hat.iter().map(|&v| f64::from(v))) * diff_norm(w, w_tilde);
    Ok(LemmaCheck::new(Lemma::Matmul, layer, lhs, rhs))
}

fn im2col(g: &ConvGeom, x: &[f32]) -> Vec<f64> {
    let klen = g.kernel_len();
    let mut p = Vec::with_capacity(g.oh * g.ow * klen);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            for k in 0..klen {
                let (c, ky, kx) = g.split(k);
                p.push(g.tap(x, c, ky, kx, oy, ox));
            }
        }
    }
    p
}

/// Convolution as a product with the im2col patch matrix `P`:
/// `‖W Pᵀ - W̃ P̂ᵀ‖_F ≤ ‖W‖_F ‖P - P̂‖_F + ‖P̂‖_F ‖W - W̃‖_F`.
#[allow(clippy::too_many_arguments)]
pub fn conv_check(
    decl: &LayerDecl,
    weight_shape: &[usize],
    in_shape: &[usize],
    out_shape: &[usize],
    w: &[f32],
    w_tilde: &[f32],
    x: &[f32],
    x_hat: &[f32],
) -> Result<LemmaCheck> {
    check_len(w, w_tilde)?;
    check_len(x, x_hat)?;
    let g = ConvGeom::new(weight_shape, in_shape, decl, out_shape);
    let klen = g.kernel_len();
    let p = im2col(&g, x);
    let p_hat = im2col(&g, x_hat);
    let mut lhs_sq = 0.0;
    for co in 0..weight_shape[0] {
        let kernel = &w[co * klen..(co + 1) * klen];
        let kernel_t = &w_tilde[co * klen..(co + 1) * klen];
        for pos in 0..g.oh * g.ow {
            let patch = &p[pos * klen..(pos + 1) * klen];
            let patch_hat = &p_hat[pos * klen..(pos + 1) * klen];
            let v: f64 = (0..klen)
                .map(|k| f64::from(kernel[k]) * patch[k] - f64::from(kernel_t[k]) * patch_hat[k])
                .sum();
            lhs_sq += v * v;
        }
    }
    let rhs = norm(w.iter().map(|&v| f64::from(v))) * norm(p.iter().zip(&p_hat).map(|(a, b)| a - b))
        + norm(p_hat.iter().copied()) * diff_norm(w, w_tilde);
    Ok(LemmaCheck::new(Lemma::Conv, &decl.name, lhs_sq.sqrt(), rhs))
}

/// `‖a ⊙ (x - x̂)‖ ≤ max |a| · ‖x - x̂‖` with per-channel scale `a`.
pub fn bn_check(layer: &str, a: &[f32], x: &[f32], x_hat: &[f32]) -> Result<LemmaCheck> {
    check_len(x, x_hat)?;
    if a.is_empty() || !x.len().is_multiple_of(a.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} scales for {} activations",
            a.len(),
            x.len()
        )));
    }
    let per = x.len() / a.len();
    let lhs = norm(
        x.iter()
            .zip(x_hat)
            .enumerate()
            .map(|(i, (&u, &v))| f64::from(a[i / per]) * (f64::from(u) - f64::from(v))),
    );
    let amax = a.iter().map(|v| f64::from(v.abs())).fold(0.0, f64::max);
    Ok(LemmaCheck::new(Lemma::BnScale, layer, lhs, amax * diff_norm(x, x_hat)))
}

/// Checks one layer of `reference` against its perturbed counterpart in
/// `perturbed_net`, given the clean input `x` and the input `x_hat` the
/// perturbed layer actually consumed.
pub fn check_layer(
    reference: &Network,
    perturbed_net: &Network,
    i: usize,
    x: &[f32],
    x_hat: &[f32],
) -> Result<Vec<LemmaCheck>> {
    let decl = &reference.layers()[i];
    let in_shape = reference.layer_input_shape(i);
    let name = decl.name.as_str();
    Ok(match decl.kind {
        LayerKind::Relu => vec![relu_check(name, x, x_hat)?],
        LayerKind::Maxpool => maxpool_check(name, in_shape, decl.window(), decl.stride(), x, x_hat)?,
        LayerKind::Avgpool => avgpool_check(name, in_shape, decl.window(), decl.stride(), x, x_hat)?,
        LayerKind::BnScale => {
            let a = reference.weight(i).expect("bn has scale");
            vec![bn_check(name, a.data(), x, x_hat)?]
        }
        LayerKind::Fc => {
            let w = reference.weight(i).expect("fc has weight");
            let wt = perturbed_net.weight(i).expect("fc has weight");
            vec![matmul_check(name, w.shape(), w.data(), wt.data(), x, x_hat)?]
        }
        LayerKind::Conv2d => {
            let w = reference.weight(i).expect("conv has weight");
            let wt = perturbed_net.weight(i).expect("conv has weight");
            vec![conv_check(
                decl,
                w.shape(),
                in_shape,
                reference.output_shape(i),
                w.data(),
                wt.data(),
                x,
                x_hat,
            )?]
        }
    })
}

/// Runs every layer's check on a paired pass: layer `i` sees the clean input
/// `X_i` and the activation-quantized perturbed input `X̂_i`.
pub fn check_pass(reference: &Network, perturbed_net: &Network, pass: &QuantizedPass) -> Result<LemmaReport> {
    let mut report = LemmaReport::default();
    for i in 0..reference.layers().len() {
        report.checks.extend(check_layer(
            reference,
            perturbed_net,
            i,
            &pass.clean[i],
            &pass.quantized_inputs[i],
        )?);
    }
    Ok(report)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
        .collect()
}

fn perturb(rng: &mut ChaCha8Rng, x: &[f32]) -> Vec<f32> {
    let scale = 10f64.powf(rng.random_range(-4.0..0.5));
    x.iter()
        .map(|&v| (f64::from(v) + rng.sample::<f64, _>(StandardNormal) * scale) as f32)
        .collect()
}

/// `trials` rounds of randomized checks for every lemma, seeded for
/// reproducibility. Each round draws fresh shapes and operands with random
/// perturbation sizes; a few rounds use all-negative ReLU inputs and unperturbed
/// operands.
pub fn random_trials(trials: usize, seed: u64) -> Result<LemmaReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LemmaReport::default();
    for t in 0..trials {
        let n = rng.random_range(1..=64);
        let x = gaussian(&mut rng, n, 1.0);
        let x_hat = match t % 10 {
            0 => x.clone(),
            _ => perturb(&mut rng, &x),
        };
        report.checks.push(relu_check("relu", &x, &x_hat)?);
        if t % 7 == 0 {
            let neg: Vec<f32> = x.iter().map(|v| -v.abs() - 1e-3).collect();
            let neg_hat: Vec<f32> = x_hat.iter().map(|v| -v.abs() - 1e-3).collect();
            report.checks.push(relu_check("relu_negative", &neg, &neg_hat)?);
        }

        let c = rng.random_range(1..=3);
        let window = rng.random_range(1..=3);
        let stride = rng.random_range(1..=window);
        let h = rng.random_range(window..=window + 5);
        let w = rng.random_range(window..=window + 5);
        let shape = [c, h, w];
        let x = gaussian(&mut rng, c * h * w, 1.0);
        let x_hat = perturb(&mut rng, &x);
        report.extend(LemmaReport {
            checks: maxpool_check("maxpool", &shape, window, stride, &x, &x_hat)?,
        });
        report.extend(LemmaReport {
            checks: avgpool_check("avgpool", &shape, window, stride, &x, &x_hat)?,
        });

        let (out_f, in_f) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let wm = gaussian(&mut rng, out_f * in_f, 0.5);
        let wm_t = perturb(&mut rng, &wm);
        let xv = gaussian(&mut rng, in_f, 1.0);
        let xv_hat = perturb(&mut rng, &xv);
        report
            .checks
            .push(matmul_check("fc", &[out_f, in_f], &wm, &wm_t, &xv, &xv_hat)?);

        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k = rng.random_range(1..=3);
        let pad = rng.random_range(0..k);
        let stride = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(k..=k + 4), rng.random_range(k..=k + 4));
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        let mut decl = LayerDecl::new("conv", LayerKind::Conv2d);
        decl.hyperparams.stride = Some(stride);
        decl.hyperparams.pad = Some(pad);
        let wshape = [co, ci, k, k];
        let wc = gaussian(&mut rng, co * ci * k * k, 0.5);
        let wc_t = perturb(&mut rng, &wc);
        let xc = gaussian(&mut rng, ci * h * w, 1.0);
        let xc_hat = perturb(&mut rng, &xc);
        report.checks.push(conv_check(
            &decl,
            &wshape,
            &[ci, h, w],
            &[co, oh, ow],
            &wc,
            &wc_t,
            &xc,
            &xc_hat,
        )?);

        let a = gaussian(&mut rng, c, 1.0);
        report.checks.push(bn_check("bn_scale", &a, &x, &x_hat)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_give_zero() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let c = relu_check("r", &x, &x).unwrap();
        assert_eq!((c.lhs, c.rhs, c.holds), (0.0, 0.0, true));
        for c in maxpool_check("m", &[1, 2, 2], 2, 2, &x, &x).unwrap() {
            assert_eq!((c.lhs, c.rhs), (0.0, 0.0));
        }
        let c = matmul_check("f", &[2, 2], &x, &x, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!((c.lhs, c.rhs), (0.0, 0.0));
    }

    #[test]
    fn negative_relu_inputs_cancel() {
        let c = relu_check("r", &[-1.0, -5.0], &[-3.0, -0.1]).unwrap();
        assert_eq!(c.lhs, 0.0);
        assert!(c.rhs > 0.0);
    }

    #[test]
    fn avgpool_chain() {
        let checks = avgpool_check("a", &[1, 2, 2], 2, 2, &[1.0, 1.0, 1.0, 1.0], &[0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(checks.len(), 2);
        assert_eq!(checks[0].lhs, 0.0);
        assert_eq!(checks[0].rhs, 1.0);
        assert_eq!(checks[1].rhs, 1.0);
    }

    #[test]
    fn detects_a_violation() {
        let c = LemmaCheck::new(Lemma::Relu, "r", 1.0, 0.5);
        assert!(!c.holds);
    }

    #[test]
    fn random_trials_hold() {
        let report = random_trials(200, 7).unwrap();
        assert_eq!(report.violation_count(), 0);
        for lemma in [
            Lemma::Relu,
            Lemma::Maxpool,
            Lemma::Avgpool,
            Lemma::Matmul,
            Lemma::Conv,
            Lemma::BnScale,
        ] {
            assert!(report.count(lemma) >= 200, "{lemma:?}");
        }
    }

    #[test]
    fn shape_errors() {
        assert!(relu_check("r", &[1.0], &[1.0, 2.0]).is_err());
        assert!(maxpool_check("m", &[4], 2, 2, &[0.0; 4], &[0.0; 4]).is_err());
        assert!(matmul_check("f", &[2, 2], &[0.0; 4], &[0.0; 4], &[0.0; 3], &[0.0; 3]).is_err());
    }
}
