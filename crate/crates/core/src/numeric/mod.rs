//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! Just enough machinery for the encoder/decoder at desk scale: f64
//! buffers, a Wengert tape, fused masked attention, and AdamW. No GPU, no
//! fusion beyond attention, fixed reduction order everywhere.

mod optim;
mod tape;
mod tensor;

pub use optim::{adamw_step, linear_lr, AdamHyper, AdamState};
pub use tape::{
    cross_entropy_row, matmul_raw, scaled_dot_attention, softmax_into, AttnMask, Gradients, Tape,
    Var,
};
pub use tensor::{AdditiveMask, Tensor};
