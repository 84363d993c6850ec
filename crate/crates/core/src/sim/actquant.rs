use serde::{Deserialize, Serialize};

use crate::residual::scale_exponent;

/// 8-bit dynamic fixed point: integers in [-128, 127] times `2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActQuantSpec {
    pub bits: u8,
    pub exponent: i32,
}

impl ActQuantSpec {
    pub fn step(&self) -> f64 {
        2f64.powi(self.exponent)
    }

    /// Largest representable magnitude on the positive side.
    pub fn max_value(&self) -> f64 {
        127.0 * self.step()
    }
}

/// Quantizes `x` with the smallest exponent whose range covers `max |x|`.
/// Every element moves by at most half a step.
pub fn quantize_activations(x: &[f32]) -> (Vec<f32>, ActQuantSpec) {
    let max_abs = x.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let spec = ActQuantSpec {
        bits: 8,
        exponent: scale_exponent(max_abs),
    };
    let step = spec.step();
    let q = x
        .iter()
        .map(|&v| ((f64::from(v) / step).round().clamp(-128.0, 127.0) * step) as f32)
        .collect();
    (q, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_cases() {
        let (q, spec) = quantize_activations(&[0.0, 0.0]);
        assert_eq!(q, vec![0.0, 0.0]);
        assert_eq!(spec.exponent, 0);
        let (q, spec) = quantize_activations(&[127.0]);
        assert_eq!(q, vec![127.0]);
        assert_eq!(spec, ActQuantSpec { bits: 8, exponent: 0 });
        let (q, _) = quantize_activations(&[-127.0, 0.4, 0.6]);
        assert_eq!(q, vec![-127.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn error_within_half_step(x in prop::collection::vec(-1e3f32..1e3, 1..200)) {
            let (q, spec) = quantize_activations(&x);
            let max_abs = x.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
            prop_assert!(max_abs <= spec.max_value());
            for (&a, &b) in x.iter().zip(&q) {
                prop_assert!((f64::from(a) - f64::from(b)).abs() <= spec.step() / 2.0);
            }
        }
    }
}
