use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Tensor;

/// A contiguous run of the row-major unrolled weight vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockView {
    pub layer: String,
    pub block_index: usize,
    pub start: usize,
    pub len: usize,
}

impl BlockView {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Splits the unrolled tensor into `ceil(len / block_size)` blocks of
/// `block_size` elements; the last block holds the remainder.
pub fn partition_blocks(t: &Tensor, block_size: usize) -> Result<Vec<BlockView>> {
    partition_len(t.name(), t.len(), block_size)
}

pub fn partition_len(layer: &str, len: usize, block_size: usize) -> Result<Vec<BlockView>> {
    if block_size == 0 {
        return Err(Error::invalid("block size must be at least 1"));
    }
    Ok((0..len)
        .step_by(block_size)
        .enumerate()
        .map(|(block_index, start)| BlockView {
            layer: layer.to_string(),
            block_index,
            start,
            len: block_size.min(len - start),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lens(len: usize, n: usize) -> Vec<usize> {
        partition_len("w", len, n).unwrap().iter().map(|b| b.len).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(lens(130, 64), vec![64, 64, 2]);
        assert_eq!(lens(64, 64), vec![64]);
        assert_eq!(lens(5, 64), vec![5]);
        let t = Tensor::from_vec("w", vec![1.0; 64]).unwrap();
        let blocks = partition_blocks(&t, 64).unwrap();
        assert_eq!(blocks[0].range(), 0..64);
        assert!(matches!(partition_len("w", 10, 0), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn blocks_cover_exactly(len in 1usize..5000, n in 1usize..300) {
            let blocks = partition_len("w", len, n).unwrap();
            prop_assert_eq!(blocks.len(), len.div_ceil(n));
            let mut next = 0;
            for (i, b) in blocks.iter().enumerate() {
                prop_assert_eq!(b.block_index, i);
                prop_assert_eq!(b.start, next);
                prop_assert!(b.len >= 1 && b.len <= n);
                if i + 1 < blocks.len() {
                    prop_assert_eq!(b.len, n);
                }
                next += b.len;
            }
            prop_assert_eq!(next, len);
        }
    }
}
