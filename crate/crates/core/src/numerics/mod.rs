//! Dense tensors, reverse-mode differentiation and the optimizer.

pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{cosine_lr, AdamW, CosineSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Runs the reverse sweep from `loss` and stores the gradient of every
/// parameter in `store` (zeros for parameters the loss does not reach).
pub fn backward(tape: &Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    let grads = tape.backward(loss)?;
    store.absorb(&grads);
    Ok(())
}
