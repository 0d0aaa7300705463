//! Minimal neural-network core: dense f64 tensors, layer forward/backward
//! pairs, a transformer encoder layer, Adam, and checkpointing. Everything
//! is CPU-only, double precision, and deterministic given a seed.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod store;
pub mod tensor;
pub mod transformer;

pub use adam::Adam;
pub use store::{Grads, GroupId, ParamId, ParamStore};
pub use tensor::Tensor;
