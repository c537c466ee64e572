//! Dense tensors, the differentiation tape, and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod layers;
mod params;
pub mod rng;
#[allow(clippy::module_inception)]
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{log_sum_exp, sigmoid, softmax_in_place, top_k_in_order, Elementwise, Graph, Var};
pub use layers::{conv_same, conv_text, linear, FilterBank};
pub use params::{Gradients, ParamId, ParamSet};
pub use rng::SeededRng;
pub use tensor::{Init, Tensor};
