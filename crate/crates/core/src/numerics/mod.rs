//! Dense tensors, a recording autodiff tape, parameters and optimizer.

pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use nn::{finite_difference, grad_norm_of_scalar_field, masked_mse, mean_all, softmax_rows, Linear};
pub use params::{glorot, Adam, Binding, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
