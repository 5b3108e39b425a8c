//! A small reverse-mode automatic differentiation engine over dense
//! row-major tensors of rank 0, 1 or 2.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Trainable weights live in a [`ParamStore`] and are
//! brought onto a tape with [`Tape::param`]; after the backward pass their
//! gradients are added back with [`Tape::accumulate_param_grads`].

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_metadata, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use gradcheck::{gradient_check, gradient_check_sampled, GradCheckReport};
pub use optim::{Adam, Sgd};
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Scalar type of every tensor.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;
