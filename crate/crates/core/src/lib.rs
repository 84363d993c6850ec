//! Post-training ternary residual quantization.
//!
//! Weights are split into fixed-size blocks, each approximated by a stack of
//! ternary levels `α_t · {-1, 0, +1}`. Levels are added greedily to the block
//! with the largest remaining error until the layer's squared relative error
//! drops below its budget. The crate also models the storage and compute cost
//! of the result and simulates inference to measure how weight and
//! activation perturbations propagate.

pub mod budget;
pub mod cli;
pub mod cost;
pub mod error;
pub mod residual;
pub mod sim;
pub mod store;
pub mod ternary;
pub mod toy;

pub use budget::{convert_model, make_schedule, BudgetSchedule, ModelConversion, ScheduleMode, ScheduleSpec};
pub use error::{Error, Result};
pub use residual::{
    downgrade, reconstruct, ternary_residual, ternary_residual_sq, LevelBudget, QuantizedLayer, QuantizedModel,
};
pub use store::{Network, Tensor};
pub use ternary::{ternarize, TernaryLevel};
