//! Storage and throughput accounting for ternary residual models.
//!
//! Scales are counted as 8-bit values and signs as 2 bits per weight. The
//! 8-8 baseline stores 8 bits per weight and performs one high-precision
//! multiplication per weight.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residual::{QuantizedLayer, QuantizedModel};

/// Default 8-2 over 8-8 power-performance gain for `N = 64`.
pub const DEFAULT_X: f64 = 5.5;
/// Default cost ratio of an 8-8 operation over an 8-2 operation.
pub const DEFAULT_C_RATIO: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub size_bits: f64,
    /// Distinct representable values, saturating at `u128::MAX`.
    pub capacity: u128,
    pub num_scaling_factors: usize,
}

/// Storage footprint of a length-`n` vector split into
/// `residuals.len()` equal blocks, block `i` carrying `residuals[i]` residual
/// levels on top of its base level.
pub fn block_stats(n: usize, residuals: &[usize]) -> Result<BlockStats> {
    let k = residuals.len();
    if k == 0 {
        return Err(Error::invalid("at least one block is required"));
    }
    let num_scaling_factors: usize = residuals.iter().map(|r| r + 1).sum();
    let size_bits = (8.0 + 2.0 * n as f64 / k as f64) * num_scaling_factors as f64;
    Ok(BlockStats {
        size_bits,
        capacity: capacity(residuals),
        num_scaling_factors,
    })
}

/// `Σ 3^(r_i + 1) - k + 1`: every block adds its `3^(r_i+1)` values but all
/// blocks share the value zero.
pub fn capacity(residuals: &[usize]) -> u128 {
    let sum = residuals.iter().fold(0u128, |acc, &r| {
        let term = u32::try_from(r + 1)
            .ok()
            .and_then(|e| 3u128.checked_pow(e))
            .unwrap_or(u128::MAX);
        acc.saturating_add(term)
    });
    if sum == u128::MAX {
        return sum;
    }
    sum - residuals.len() as u128 + 1
}

/// High-precision multiplications saved per weight relative to 8-8: one
/// scale multiply per level-block replaces `N` multiplies.
pub fn mult_reduction(block_size: f64, blocks_factor: f64) -> f64 {
    block_size / blocks_factor
}

/// 8 bits per weight over `blocks_factor · (2 + 8/N)` bits per weight.
pub fn size_reduction_vs_88(block_size: f64, blocks_factor: f64) -> f64 {
    8.0 / (blocks_factor * (2.0 + 8.0 / block_size))
}

/// Power-performance gain `X / (C (X/N + 1))` of a residual model using
/// `compute_factor` times the base compute, where `x` is the gain of plain
/// 8-2 over 8-8.
pub fn power_perf_gain(x: f64, compute_factor: f64, block_size: f64) -> f64 {
    x / (compute_factor * (x / block_size + 1.0))
}

/// Compute-bound and bandwidth-bound gains `(π_c, π_m)` over 8-8 for cost
/// ratio `c = C8 / C2` and `level_factor = r + 1` levels per block.
pub fn throughput_gains(c: f64, block_size: f64, level_factor: f64) -> (f64, f64) {
    let pi_c = c / (level_factor * (c / block_size + 1.0));
    let pi_m = 4.0 / (level_factor * (1.0 / block_size + 1.0));
    (pi_c, pi_m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub weights: usize,
    pub blocks: usize,
    pub levels: usize,
    pub model_size_bits: f64,
    pub capacity: u128,
    pub num_scaling_factors: usize,
    pub blocks_factor: f64,
    pub flops: u64,
}

impl LayerCost {
    pub fn of_layer(layer: &QuantizedLayer, flops: u64) -> Self {
        let residuals = layer.residual_counts();
        let model_size_bits = layer
            .stacks
            .iter()
            .map(|s| s.levels.len() as f64 * (8.0 + 2.0 * s.block.len as f64))
            .sum();
        let levels = layer.total_levels();
        Self {
            name: layer.name.clone(),
            weights: layer.len(),
            blocks: layer.base_blocks(),
            levels,
            model_size_bits,
            capacity: capacity(&residuals),
            num_scaling_factors: levels,
            blocks_factor: levels as f64 / layer.base_blocks().max(1) as f64,
            flops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub block_size: usize,
    pub x: f64,
    pub c_ratio: f64,
    pub layers: Vec<LayerCost>,
    pub total: LayerCost,
    /// Total levels over base blocks.
    pub blocks_factor: f64,
    /// Per-layer level factors weighted by each layer's multiply count.
    pub compute_factor: f64,
    /// From `blocks_factor`.
    pub mult_reduction_vs_88: f64,
    /// From `blocks_factor`.
    pub size_reduction_vs_88: f64,
    /// From `compute_factor`.
    pub power_perf_gain: f64,
    /// From `compute_factor`.
    pub pi_c: f64,
    /// From `blocks_factor`.
    pub pi_m: f64,
}

impl CostReport {
    /// Builds the report; `flops` maps layer names to multiply counts (missing
    /// names count as zero).
    pub fn from_model(model: &QuantizedModel, flops: &BTreeMap<String, u64>, x: f64, c_ratio: f64) -> Self {
        let layers: Vec<LayerCost> = model
            .layers
            .iter()
            .map(|l| LayerCost::of_layer(l, flops.get(&l.name).copied().unwrap_or(0)))
            .collect();
        let all_residuals: Vec<usize> = model.layers.iter().flat_map(|l| l.residual_counts()).collect();
        let blocks: usize = layers.iter().map(|l| l.blocks).sum();
        let levels: usize = layers.iter().map(|l| l.levels).sum();
        let total_flops: u64 = layers.iter().map(|l| l.flops).sum();
        let blocks_factor = if blocks == 0 {
            1.0
        } else {
            levels as f64 / blocks as f64
        };
        let compute_factor = if total_flops == 0 {
            blocks_factor
        } else {
            layers.iter().map(|l| l.flops as f64 * l.blocks_factor).sum::<f64>() / total_flops as f64
        };
        let total = LayerCost {
            name: "total".into(),
            weights: layers.iter().map(|l| l.weights).sum(),
            blocks,
            levels,
            model_size_bits: layers.iter().map(|l| l.model_size_bits).sum(),
            capacity: if all_residuals.is_empty() {
                0
            } else {
                capacity(&all_residuals)
            },
            num_scaling_factors: levels,
            blocks_factor,
            flops: total_flops,
        };
        let n = model.provenance.block_size as f64;
        let (pi_c, _) = throughput_gains(c_ratio, n, compute_factor);
        let (_, pi_m) = throughput_gains(c_ratio, n, blocks_factor);
        Self {
            block_size: model.provenance.block_size,
            x,
            c_ratio,
            layers,
            total,
            blocks_factor,
            compute_factor,
            mult_reduction_vs_88: mult_reduction(n, blocks_factor),
            size_reduction_vs_88: size_reduction_vs_88(n, blocks_factor),
            power_perf_gain: power_perf_gain(x, compute_factor, n),
            pi_c,
            pi_m,
        }
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(
            out,
            "{:<16} {:>9} {:>8} {:>8} {:>9} {:>14} {:>14} {:>12} {:>12}",
            "layer", "weights", "blocks", "levels", "# Blocks", "Model Size", "Model Capacity", "# Scaling", "FLOPs"
        )?;
        for l in self.layers.iter().chain(std::iter::once(&self.total)) {
            writeln!(
                out,
                "{:<16} {:>9} {:>8} {:>8} {:>8.3}x {:>14.0} {:>14} {:>12} {:>12}",
                l.name,
                l.weights,
                l.blocks,
                l.levels,
                l.blocks_factor,
                l.model_size_bits,
                format_capacity(l.capacity),
                l.num_scaling_factors,
                l.flops
            )?;
        }
        writeln!(out)?;
        let rows = [
            ("block size N".to_string(), self.block_size.to_string()),
            ("blocks factor".to_string(), format!("{:.3}x", self.blocks_factor)),
            (
                "compute factor (FLOPs)".to_string(),
                format!("{:.3}x", self.compute_factor),
            ),
            (
                "mult reduction vs 8-8".to_string(),
                format!("{:.2}x", self.mult_reduction_vs_88),
            ),
            (
                "size reduction vs 8-8".to_string(),
                format!("{:.2}x", self.size_reduction_vs_88),
            ),
            (
                format!("power-perf gain (X={})", self.x),
                format!("{:.2}x", self.power_perf_gain),
            ),
            (format!("pi_c (c={})", self.c_ratio), format!("{:.2}", self.pi_c)),
            ("pi_m".to_string(), format!("{:.2}", self.pi_m)),
        ];
        for (i, (label, value)) in rows.iter().enumerate() {
            if i > 0 {
                writeln!(out)?;
            }
            write!(out, "{label:<26} {value}")?;
        }
        f.write_str(&out)
    }
}

fn format_capacity(c: u128) -> String {
    if c == u128::MAX {
        ">2^128".into()
    } else if c >= 1_000_000_000_000 {
        format!("{:.3e}", c as f64)
    } else {
        c.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn block_stats_rows() {
        let s = block_stats(64, &[0]).unwrap();
        assert_eq!((s.size_bits, s.capacity, s.num_scaling_factors), (136.0, 3, 1));
        let s = block_stats(64, &[1]).unwrap();
        assert_eq!((s.size_bits, s.capacity, s.num_scaling_factors), (272.0, 9, 2));
        let s = block_stats(128, &[1, 0]).unwrap();
        assert_eq!((s.size_bits, s.capacity, s.num_scaling_factors), (408.0, 11, 3));
        assert!(block_stats(10, &[]).is_err());
        assert_eq!(capacity(&[200]), u128::MAX);
    }

    #[test]
    fn ratios() {
        assert!(close(mult_reduction(64.0, 2.0), 32.0, 1e-12));
        assert!(close(mult_reduction(64.0, 2.4), 26.6667, 1e-4));
        assert_eq!(mult_reduction(64.0, 1.0), 64.0);
        assert!(close(size_reduction_vs_88(64.0, 2.4), 1.5686, 1e-4));
        assert!(close(size_reduction_vs_88(64.0, 2.0), 1.8824, 1e-4));
        assert_eq!(size_reduction_vs_88(f64::INFINITY, 1.0), 4.0);
        assert!(close(power_perf_gain(5.5, 2.5, 64.0), 2.026, 1e-3));
        assert!(close(power_perf_gain(5.5, 2.2, 64.0), 2.302, 1e-3));
        assert_eq!(power_perf_gain(5.5, 1.0, f64::INFINITY), 5.5);
    }

    #[test]
    fn throughput() {
        let (pc, pm) = throughput_gains(5.0, 64.0, 2.4);
        assert!(close(pc, 1.932, 1e-3));
        assert!(close(pm, 1.641, 1e-3));
        let (pc_inf, pm_inf) = throughput_gains(5.0, f64::INFINITY, 1.0);
        assert_eq!((pc_inf, pm_inf), (5.0, 4.0));
        let (pc2, pm2) = throughput_gains(5.0, 64.0, 4.8);
        assert!(close(pc2 * 2.0, pc, 1e-12) && close(pm2 * 2.0, pm, 1e-12));
    }
}
