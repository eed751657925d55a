//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its output
//! and whatever it needs for the backward sweep. Parameters enter as leaves
//! copied from [`Tensor`]s; after [`Graph::backward`] their gradients are read
//! back with [`Graph::grad`].

mod graph;
mod tensor;

pub use graph::{
    bce_with_logits, broadcast_shape, gelu, sigmoid, ElementwiseOp, Graph, NodeId, LAYER_NORM_EPS,
};
pub use tensor::Tensor;

/// Named traversal over learnable tensors, in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n));
        names
    }

    /// Total number of learnable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}
