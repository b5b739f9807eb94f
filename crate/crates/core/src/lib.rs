//! Hybrid sequence-model kernels: state space duality, dynamic-mask attention,
//! product-key expert retrieval and the stacks built from them.

pub mod cdmoe;
pub mod dma;
pub mod error;
pub mod model;
pub mod rope;
pub mod ssd;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{IndexTensor, Tensor};
