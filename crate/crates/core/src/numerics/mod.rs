//! Dense tensors, a parameter store, reverse-mode gradients and optimizers.

pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, ReduceOnPlateau, Sgd};
pub use params::{Init, ParamStore};
pub use tape::{sum_all, Graph, Var};
pub use tensor::{argmax, elementwise, matmul, sigmoid, softmax, Activation, Tensor};

pub(crate) use tape::violation_sq;

/// Optimizer state for Adam; moments are tracked per parameter name.
pub type AdamState = Adam;

/// Reverse pass from `loss` into `params`; see [`Graph::backward`].
pub fn backward(graph: &Graph, loss: Var, params: &mut ParamStore) -> crate::Result<()> {
    graph.backward(loss, params)
}

#[cfg(test)]
mod tests;
