//! Dense tensors, reverse-mode differentiation, attention primitives and Adam.

mod adam;
mod attention;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use attention::{attention_pool, multi_head_self_attention, AttentionParams, PoolingParams};
pub use gradcheck::{finite_difference_check, graph_fn};
pub use graph::{Gradients, Graph, ParamGrad, Var};
pub use params::ParamStore;
pub use tensor::{matmul, softmax, Tensor};
