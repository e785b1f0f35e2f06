//! Small dense numeric core: row-major 2-D tensors, a per-pass
//! reverse-mode differentiation tape, named parameters, Adam and a
//! bit-exact checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NumError, Result};
pub use graph::{softmax_tensor, BatchStats, Gradients, Graph, Var, CE_FLOOR};
pub use optim::{adam_step, AdamConfig};
pub use params::{Init, ParamId, Parameter, ParameterStore};
pub use tensor::{Precision, Tensor};
