use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Margin {
    Safe,
    Unsafe,
}

/// Top-1 index and the gap to the runner-up. Ties resolve to the lowest index.
pub fn top_gap(y: &[f32]) -> Result<(usize, f64)> {
    if y.len() < 2 {
        return Err(Error::invalid(format!(
            "margin needs at least 2 classes, got {}",
            y.len()
        )));
    }
    let mut best = 0;
    for (i, &v) in y.iter().enumerate() {
        if v > y[best] {
            best = i;
        }
    }
    let runner_up = y
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &v)| f64::from(v))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((best, f64::from(y[best]) - runner_up))
}

/// Whether every `ŷ` with `‖y - ŷ‖₂ ≤ delta` keeps the argmax of `y`.
///
/// Lowering the winner by `a` and raising a rival by `b` costs at least
/// `sqrt(a² + b²)` in ℓ2, so the argmax survives whenever
/// `gap > a + b`, and `a + b ≤ √2 · delta`.
pub fn margin_check(y: &[f32], delta: f64) -> Result<Margin> {
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::invalid(format!("delta must be non-negative, got {delta}")));
    }
    let (_, gap) = top_gap(y)?;
    if delta == 0.0 || gap > std::f64::consts::SQRT_2 * delta {
        Ok(Margin::Safe)
    } else {
        Ok(Margin::Unsafe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_cases() {
        assert_eq!(margin_check(&[1.0, 0.0], 0.5).unwrap(), Margin::Safe);
        assert_eq!(margin_check(&[1.0, 0.0], 0.75).unwrap(), Margin::Unsafe);
        assert_eq!(margin_check(&[2.0, 2.0, 1.0], 0.0).unwrap(), Margin::Safe);
        assert_eq!(margin_check(&[0.0, 3.0, 2.5], 0.3).unwrap(), Margin::Safe);
        assert_eq!(margin_check(&[0.0, 3.0, 2.5], 0.36).unwrap(), Margin::Unsafe);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(margin_check(&[1.0], 0.1), Err(Error::InvalidArgument(_))));
        assert!(matches!(margin_check(&[], 0.1), Err(Error::InvalidArgument(_))));
        assert!(margin_check(&[1.0, 0.0], -1.0).is_err());
        assert!(margin_check(&[1.0, 0.0], f64::NAN).is_err());
    }

    #[test]
    fn worst_case_direction_sits_on_the_boundary() {
        // Moving both coordinates by delta/√2 toward each other closes a gap
        // of exactly √2·delta.
        let delta = 0.5f64;
        let gap = std::f64::consts::SQRT_2 * delta;
        let y = [gap as f32, 0.0];
        assert_eq!(margin_check(&y, delta * 1.0001).unwrap(), Margin::Unsafe);
        let step = delta / std::f64::consts::SQRT_2;
        assert!((f64::from(y[0]) - step) - step < 1e-6);
    }
}
