//! Dense arrays with reverse-mode differentiation.
//!
//! Learnable state lives in [`ParamTensor`]s owned by the layers. A forward
//! pass records primitives on a [`Tape`]; [`Tape::backward`] replays them in
//! reverse and returns [`Gradients`] that can be accumulated into the
//! parameters' gradient buffers. Every value is a 64-bit float and every
//! recorded node is a 2-D row-major matrix.

pub mod kernels;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

pub use tape::{Fault, Gradients, OpKind, Tape, Var};

use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Identity of a parameter buffer on a tape. Fresh for every constructed or
/// cloned [`ParamTensor`], so two copies never alias on the same tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug)]
pub struct ParamTensor {
    id: ParamId,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Clone for ParamTensor {
    fn clone(&self) -> Self {
        ParamTensor {
            id: ParamId::fresh(),
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl ParamTensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "parameter shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape("ParamTensor::new", shape, &[values.len()]));
        }
        Ok(ParamTensor {
            id: ParamId::fresh(),
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Replace the values, keeping shape. Used by checkpoint loading.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::shape("ParamTensor::assign", &self.shape, &[values.len()]));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// 2-D view used on the tape: first axis is rows, remaining axes are
    /// flattened into columns. A 1-D parameter is a column vector.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => unreachable!("validated at construction"),
        }
    }
}
