//! Differentiable primitives: tensors, the reverse-mode tape, layer
//! builders, parameter storage, and the finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::check_gradients;
pub use params::{init_params, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
