//! On-disk tensors and manifests. Also splits weights into contiguous blocks
//! and defines the quantized container format.

mod blocks;
pub mod container;
mod manifest;
mod network;
pub mod npy;
mod tensor;

pub use blocks::{partition_blocks, partition_len, BlockView};
pub use container::{load_quantized, save_quantized};
pub use manifest::{HyperParams, LayerDecl, LayerKind, ModelManifest};
pub use network::{infer_shapes, LayerParams, Network};
pub use npy::{load_tensor, save_tensor};
pub use tensor::Tensor;
pub(crate) use tensor::{diff_norm_sq, norm_sq};
