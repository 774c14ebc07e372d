//! Dense arrays, reverse-mode differentiation and Adam.

mod adam;
mod array;
mod nn;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use array::DenseArray;
pub use nn::{Activation, Linear, Mlp};
pub use tape::{sinusoidal_encoding, Gradients, Tape, Var, LAYER_NORM_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite values in parameter `{0}`")]
    NonFiniteParameter(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique parameter identity, used to route gradients from a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        Self(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable array and its accumulated gradient.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: DenseArray,
    grad: DenseArray,
}

impl Clone for Parameter {
    /// Clones get a fresh identity so they never alias the original on a tape.
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: DenseArray) -> Result<Self, NumericsError> {
        let name = name.into();
        if !value.is_finite() {
            return Err(NumericsError::NonFiniteParameter(name));
        }
        let grad = DenseArray::zeros(value.shape());
        Ok(Self {
            id: ParamId::fresh(),
            name,
            value,
            grad,
        })
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &DenseArray {
        &self.value
    }

    pub fn grad(&self) -> &DenseArray {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut DenseArray {
        &mut self.grad
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: DenseArray) -> Result<(), NumericsError> {
        if value.shape() != self.value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_value",
                left: self.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFiniteParameter(self.name.clone()));
        }
        self.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self) -> &mut DenseArray {
        &mut self.value
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds this parameter's share of `grads`, if it was bound on the tape.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if let Some(g) = grads.get(self.id) {
            for (d, x) in self.grad.data_mut().iter_mut().zip(g.data()) {
                *d += x;
            }
        }
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn accumulate_grads(&mut self, grads: &Gradients) {
        self.visit_params_mut(&mut |p| p.accumulate(grads));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value().len());
        n
    }
}
