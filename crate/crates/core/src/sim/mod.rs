//! Reference and quantized forward passes with perturbation measurements.

mod actquant;
mod forward;
pub mod lemmas;
mod margin;
mod ops;
mod sensitivity;

pub use actquant::{quantize_activations, ActQuantSpec};
pub use forward::{
    batch_trace, check_alignment, forward, forward_quantized, infer_batch, ForwardPass, PerturbationTrace,
    QuantizedPass, TraceEntry, PATH_AGREEMENT,
};
pub use lemmas::{Lemma, LemmaCheck, LemmaReport};
pub use margin::{margin_check, top_gap, Margin};
pub use sensitivity::{depth_sensitivity, inject_noise, DepthSensitivity};
