//! Minimal dense-tensor substrate: 64-bit tensors, seeded randomness,
//! reverse-mode autodiff over a fixed primitive set, finite-difference
//! gradient checking, and deterministic optimizers.

mod gradcheck;
mod graph;
mod optim;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, DEFAULT_FD_STEP};
pub use graph::{Graph, NodeId};
pub use optim::{sgd_step, Adam};
pub use rng::SeededRng;
pub use tensor::{
    kahan_sum, layer_norm, sigmoid, sigmoid_scalar, silu, silu_scalar, softmax_attention,
    softmax_rows, softplus_scalar, Tensor, EPS_LN,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value encountered: {what}")]
    NonFinite { what: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// A trainable tensor paired with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub gradient: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape().to_vec());
        Self { value, gradient }
    }

    pub fn zero_grad(&mut self) {
        self.gradient = Tensor::zeros(self.value.shape().to_vec());
    }
}

/// Visitor over a model's named parameters, in a stable order.
///
/// Everything that trains, checkpoints, or gradient-checks goes through this
/// trait: `visit` drives checkpoint dumps and parameter flattening, while
/// `visit_mut` lets the finite-difference harness and optimizers write
/// perturbed or updated values back.
pub trait ParamMap {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn params_flat(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t.clone()));
        out
    }

    fn set_params_flat(&mut self, values: &[Tensor]) {
        let mut i = 0;
        self.visit_mut(&mut |_, t| {
            *t = values[i].clone();
            i += 1;
        });
        assert_eq!(i, values.len(), "parameter count mismatch");
    }
}
