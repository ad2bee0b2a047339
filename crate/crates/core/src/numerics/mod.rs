//! Dense tensors, the reverse-mode tape, initialization and Adam.

pub(crate) mod attention;
mod broadcast;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod real;
mod rng;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Elementwise, Gradients, Graph, Var};
pub use params::{adam_step, glorot_bound, init_params, AdamConfig, GradStore, Init, Param, ParamSpec, ParamStore};
pub use real::Real;
pub use rng::{Rng, RngState};
pub use tensor::{ComplexSequence, Tensor};

pub(crate) use graph::softmax_and_nll;
pub(crate) use tensor::rows_cols;

/// Mean cross-entropy of `(.., V)` logits against integer targets, without
/// recording a graph.
pub fn cross_entropy_logits<T: Real>(logits: &Tensor<T>, targets: &[u32]) -> crate::Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets)?;
    Ok(g.value(loss).item().expect("scalar loss"))
}
