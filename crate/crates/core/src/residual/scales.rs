use super::{QuantizedLayer, QuantizedModel};
use crate::error::{Error, Result};
use crate::store::Network;

/// Smallest `e` with `max_abs <= 127 · 2^e`; 0 for a zero input.
pub fn scale_exponent(max_abs: f64) -> i32 {
    if max_abs <= 0.0 || !max_abs.is_finite() {
        return 0;
    }
    let mut e = (max_abs / 127.0).log2().ceil() as i32;
    while max_abs > 127.0 * 2f64.powi(e) {
        e += 1;
    }
    while max_abs <= 127.0 * 2f64.powi(e - 1) {
        e -= 1;
    }
    e
}

/// Rounds every scale of the layer to an 8-bit dynamic fixed-point value
/// sharing one exponent, then recomputes `δ` against `w`. Levels whose scale
/// rounds to zero lose their signs.
pub fn quantize_layer_scales(layer: &QuantizedLayer, w: &[f32]) -> Result<QuantizedLayer> {
    let max_alpha = layer
        .stacks
        .iter()
        .flat_map(|s| s.levels.iter().map(|l| f64::from(l.alpha)))
        .fold(0.0, f64::max);
    let mut out = layer.clone();
    if max_alpha == 0.0 {
        return Ok(out);
    }
    let e = scale_exponent(max_alpha);
    let step = 2f64.powi(e);
    for level in out.stacks.iter_mut().flat_map(|s| s.levels.iter_mut()) {
        let q = (f64::from(level.alpha) / step).round().clamp(0.0, 127.0);
        level.alpha = (q * step) as f32;
        if level.alpha == 0.0 {
            level.signs.iter_mut().for_each(|s| *s = 0);
        }
    }
    out.scale_exponent = Some(e);
    out.delta = out.delta_against(w)?;
    Ok(out)
}

/// Applies [`quantize_layer_scales`] to every layer, using `reference` for
/// the source weights.
pub fn quantize_scales_8bit(model: &QuantizedModel, reference: &Network) -> Result<QuantizedModel> {
    let mut out = model.clone();
    for layer in &mut out.layers {
        let idx = reference
            .layer_index(&layer.name)
            .ok_or_else(|| Error::invalid(format!("reference network lacks layer {:?}", layer.name)))?;
        let w = reference
            .weight(idx)
            .ok_or_else(|| Error::invalid(format!("reference layer {:?} has no weight", layer.name)))?;
        *layer = quantize_layer_scales(layer, w.data())?;
    }
    out.provenance.scales_8bit = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_is_minimal() {
        assert_eq!(scale_exponent(127.0), 0);
        assert_eq!(scale_exponent(127.5), 1);
        assert_eq!(scale_exponent(1.0), -6);
        assert_eq!(scale_exponent(0.0), 0);
        for &m in &[1e-6, 0.37, 3.0, 1e4] {
            let e = scale_exponent(m);
            assert!(m <= 127.0 * 2f64.powi(e));
            assert!(m > 127.0 * 2f64.powi(e - 1));
        }
    }
}
