//! Layer kernels. Accumulation is f64; activations are stored as f32.

use crate::residual::QuantizedLayer;
use crate::store::{LayerDecl, LayerKind, Network, Tensor};

/// Runs layer `i` of `net` on `x`.
pub(crate) fn apply_layer(net: &Network, i: usize, x: &[f32]) -> Vec<f32> {
    let decl = &net.layers()[i];
    let in_shape = net.layer_input_shape(i);
    let out_shape = net.output_shape(i);
    let weight = net.weight(i);
    let bias = net.bias(i).map(Tensor::data);
    match decl.kind {
        LayerKind::Fc => fc(weight.expect("fc has weight"), bias, x),
        LayerKind::Conv2d => conv2d(weight.expect("conv has weight"), bias, x, in_shape, decl, out_shape),
        LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::Maxpool => pool(x, in_shape, decl, out_shape, PoolKind::Max),
        LayerKind::Avgpool => pool(x, in_shape, decl, out_shape, PoolKind::Avg),
        LayerKind::BnScale => bn_scale(weight.expect("bn has scale").data(), bias, x),
    }
}

pub(crate) fn fc(w: &Tensor, bias: Option<&[f32]>, x: &[f32]) -> Vec<f32> {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    (0..out_f)
        .map(|o| {
            let row = &wd[o * in_f..(o + 1) * in_f];
            let dot: f64 = row.iter().zip(x).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            (dot + bias.map_or(0.0, |b| f64::from(b[o]))) as f32
        })
        .collect()
}

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(weight_shape: &[usize], in_shape: &[usize], decl: &LayerDecl, out_shape: &[usize]) -> Self {
        Self {
            c_in: in_shape[0],
            h: in_shape[1],
            w: in_shape[2],
            kh: weight_shape[2],
            kw: weight_shape[3],
            oh: out_shape[1],
            ow: out_shape[2],
            stride: decl.stride(),
            pad: decl.pad(),
        }
    }

    /// Input value under kernel tap (c, ky, kx) for output (oy, ox); zero in
    /// the padding.
    #[inline]
    pub fn tap(&self, x: &[f32], c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> f64 {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
            0.0
        } else {
            f64::from(x[(c * self.h + iy as usize) * self.w + ix as usize])
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Splits a flat index within one output channel's kernel into (c, ky, kx).
    #[inline]
    pub fn split(&self, k: usize) -> (usize, usize, usize) {
        (k / (self.kh * self.kw), (k / self.kw) % self.kh, k % self.kw)
    }
}

pub(crate) fn conv2d(
    w: &Tensor,
    bias: Option<&[f32]>,
    x: &[f32],
    in_shape: &[usize],
    decl: &LayerDecl,
    out_shape: &[usize],
) -> Vec<f32> {
    let g = ConvGeom::new(w.shape(), in_shape, decl, out_shape);
    let c_out = w.shape()[0];
    let klen = g.kernel_len();
    let wd = w.data();
    let mut out = Vec::with_capacity(c_out * g.oh * g.ow);
    for co in 0..c_out {
        let kernel = &wd[co * klen..(co + 1) * klen];
        let b = bias.map_or(0.0, |b| f64::from(b[co]));
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = b;
                for (k, &wv) in kernel.iter().enumerate() {
                    let (c, ky, kx) = g.split(k);
                    acc += f64::from(wv) * g.tap(x, c, ky, kx, oy, ox);
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
pub(crate) enum PoolKind {
    Max,
    Avg,
}

pub(crate) fn pool(x: &[f32], in_shape: &[usize], decl: &LayerDecl, out_shape: &[usize], kind: PoolKind) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (k, s) = (decl.window(), decl.stride());
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let window = (0..k)
                    .flat_map(|dy| (0..k).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| x[(ch * h + oy * s + dy) * w + ox * s + dx]);
                let v = match kind {
                    PoolKind::Max => window.fold(f32::NEG_INFINITY, f32::max),
                    PoolKind::Avg => (window.map(f64::from).sum::<f64>() / (k * k) as f64) as f32,
                };
                out.push(v);
            }
        }
    }
    out
}

pub(crate) fn bn_scale(a: &[f32], b: Option<&[f32]>, x: &[f32]) -> Vec<f32> {
    let per_channel = x.len() / a.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / per_channel;
            (f64::from(a[c]) * f64::from(v) + b.map_or(0.0, |b| f64::from(b[c]))) as f32
        })
        .collect()
}

/// Fully connected layer evaluated level by level: for every block and level
/// the inputs selected by the signs are added or subtracted, and the partial
/// sum is multiplied once by the level's scale.
pub(crate) fn fc_decomposed(layer: &QuantizedLayer, bias: Option<&[f32]>, x: &[f32]) -> Vec<f32> {
    let (out_f, in_f) = (layer.shape[0], layer.shape[1]);
    let mut acc = vec![0.0f64; out_f];
    for stack in &layer.stacks {
        for level in &stack.levels {
            let alpha = f64::from(level.alpha);
            let mut row = stack.block.start / in_f;
            let mut partial = 0.0f64;
            for (j, &s) in level.signs.iter().enumerate() {
                let idx = stack.block.start + j;
                if idx / in_f != row {
                    acc[row] += alpha * partial;
                    row = idx / in_f;
                    partial = 0.0;
                }
                match s {
                    1 => partial += f64::from(x[idx % in_f]),
                    -1 => partial -= f64::from(x[idx % in_f]),
                    _ => {}
                }
            }
            acc[row] += alpha * partial;
        }
    }
    acc.iter()
        .enumerate()
        .map(|(o, &v)| (v + bias.map_or(0.0, |b| f64::from(b[o]))) as f32)
        .collect()
}

/// Convolution evaluated level by level, as [`fc_decomposed`].
pub(crate) fn conv_decomposed(
    layer: &QuantizedLayer,
    bias: Option<&[f32]>,
    x: &[f32],
    in_shape: &[usize],
    decl: &LayerDecl,
    out_shape: &[usize],
) -> Vec<f32> {
    let g = ConvGeom::new(&layer.shape, in_shape, decl, out_shape);
    let c_out = layer.shape[0];
    let klen = g.kernel_len();
    let plane = g.oh * g.ow;
    let mut acc = vec![0.0f64; c_out * plane];
    let mut partial = vec![0.0f64; plane];
    for stack in &layer.stacks {
        for level in &stack.levels {
            let alpha = f64::from(level.alpha);
            let mut co = stack.block.start / klen;
            partial.iter_mut().for_each(|p| *p = 0.0);
            for (j, &s) in level.signs.iter().enumerate() {
                let idx = stack.block.start + j;
                if idx / klen != co {
                    flush(&mut acc[co * plane..(co + 1) * plane], &mut partial, alpha);
                    co = idx / klen;
                }
                if s == 0 {
                    continue;
                }
                let (c, ky, kx) = g.split(idx % klen);
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let v = g.tap(x, c, ky, kx, oy, ox);
                        if s > 0 {
                            partial[oy * g.ow + ox] += v;
                        } else {
                            partial[oy * g.ow + ox] -= v;
                        }
                    }
                }
            }
            flush(&mut acc[co * plane..(co + 1) * plane], &mut partial, alpha);
        }
    }
    acc.iter()
        .enumerate()
        .map(|(i, &v)| (v + bias.map_or(0.0, |b| f64::from(b[i / plane]))) as f32)
        .collect()
}

fn flush(dst: &mut [f64], partial: &mut [f64], alpha: f64) {
    for (d, p) in dst.iter_mut().zip(partial.iter_mut()) {
        *d += alpha * *p;
        *p = 0.0;
    }
}
