//! Dense tensors, a reverse-mode tape, layers and the Adam optimiser.

mod adam;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig, Moments};
pub use gradcheck::finite_diff_check;
pub(crate) use graph::sigmoid;
pub use graph::{Graph, Var};
pub use layers::{Activation, Gru, Mlp, GRU_INIT_SCALE};
pub use params::{clip_global_norm, global_norm, Gradients, Parameter, ParameterSet};
pub use tensor::Tensor;
