//! Dense tensors, reverse-mode differentiation, optimizers and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
mod tensor;

pub use attention::multi_head_attention;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Csr, Gradients, Graph, Var, BCE_CLAMP};
pub use optim::{AdamConfig, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;

/// `-(y ln p + (1-y) ln(1-p))` with `p` clamped as in [`Graph::bce`].
pub fn bce_loss(p: f64, y: f64) -> crate::error::Result<f64> {
    if y != 0.0 && y != 1.0 {
        return Err(crate::error::CoraError::Validation(format!("label {y} is not 0 or 1")));
    }
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// The same loss written on the logit, `softplus(z) - y z`.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}
