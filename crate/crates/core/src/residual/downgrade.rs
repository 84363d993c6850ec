use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::QuantizedModel;
use crate::error::{Error, Result};

/// How many levels to keep when downgrading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelBudget {
    /// Keep exactly this many levels in total.
    Total(usize),
    /// Keep this fraction (rounded up) of the current level count.
    Fraction(f64),
    /// Keep at most `factor × base blocks` levels.
    BlocksFactor(f64),
}

impl LevelBudget {
    fn resolve(self, current: usize, base: usize) -> Result<usize> {
        let target = match self {
            LevelBudget::Total(n) => n,
            LevelBudget::Fraction(f) if f > 0.0 && f <= 1.0 => (f * current as f64).ceil() as usize,
            LevelBudget::BlocksFactor(f) if f >= 1.0 => (f * base as f64 + 1e-9).floor() as usize,
            other => return Err(Error::invalid(format!("malformed level budget {other:?}"))),
        };
        if target < base {
            return Err(Error::invalid(format!(
                "budget of {target} levels is below the {base} base levels"
            )));
        }
        Ok(target.min(current))
    }
}

struct Tail {
    importance: f64,
    layer: usize,
    block: usize,
}

impl PartialEq for Tail {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Tail {}
impl PartialOrd for Tail {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Tail {
    fn cmp(&self, other: &Self) -> Ordering {
        self.importance
            .total_cmp(&other.importance)
            .then(self.layer.cmp(&other.layer))
            .then(self.block.cmp(&other.block))
    }
}

/// Disables residual levels, least important first, until the budget is met.
///
/// Importance of a level is `‖α Ŵ‖² / ‖W_layer‖²`, compared globally across
/// layers. Only the outermost level of a block is ever removed, so what
/// remains is always a prefix of the greedy stack; each residual is
/// orthogonal to the level fitted to it, so removing that level raises the
/// layer's `δ` by exactly its importance. Base levels are never removed.
pub fn downgrade(model: &QuantizedModel, budget: LevelBudget) -> Result<QuantizedModel> {
    if model.provenance.scales_8bit {
        return Err(Error::invalid(
            "downgrade a model before quantizing its scales; 8-bit scales break the orthogonality used to update delta",
        ));
    }
    let current = model.total_levels();
    let target = budget.resolve(current, model.base_blocks())?;
    let mut out = model.clone();
    if target == current {
        return Ok(out);
    }

    let importance = |m: &QuantizedModel, l: usize, b: usize| -> f64 {
        let layer = &m.layers[l];
        let level = layer.stacks[b].levels.last().expect("stacks are non-empty");
        if layer.weight_norm_sq == 0.0 {
            0.0
        } else {
            level.energy() / layer.weight_norm_sq
        }
    };

    let mut heap = BinaryHeap::new();
    for (l, layer) in out.layers.iter().enumerate() {
        for (b, stack) in layer.stacks.iter().enumerate() {
            if stack.levels.len() > 1 {
                heap.push(Reverse(Tail {
                    importance: importance(&out, l, b),
                    layer: l,
                    block: b,
                }));
            }
        }
    }

    let mut remaining = current;
    while remaining > target {
        let Reverse(tail) = heap.pop().expect("levels above base remain while over budget");
        let layer = &mut out.layers[tail.layer];
        layer.stacks[tail.block].levels.pop();
        layer.delta += tail.importance;
        remaining -= 1;
        if layer.stacks[tail.block].levels.len() > 1 {
            heap.push(Reverse(Tail {
                importance: importance(&out, tail.layer, tail.block),
                ..tail
            }));
        }
    }
    Ok(out)
}
