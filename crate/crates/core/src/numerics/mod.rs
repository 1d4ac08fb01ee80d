//! Dense `f64` tensors and a small reverse-mode autodiff tape with exactly the ops the
//! detector needs.

mod checkpoint;
pub mod conv;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use optim::{sgd_step, Sgd, StepDecay};
pub use params::{he_uniform, ParamId, ParamStore, Parameter};
pub use tape::{softmax_along, Gradients, Tape, Var};
pub use tensor::Tensor;
