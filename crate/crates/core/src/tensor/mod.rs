//! Dense f64 tensors with reverse-mode differentiation.
//!
//! The engine is deliberately small: row-major [`Tensor`] values, a [`Graph`]
//! that records operations as they execute, and hand-written kernels for the
//! two ops a selective-state-space model needs beyond basic linear algebra
//! (the selective scan and the causal depthwise convolution). Everything runs
//! in 64-bit floats so gradients can be validated against central finite
//! differences at tight tolerances.

pub mod graph;
pub mod kernels;
pub(crate) mod pool;

pub use graph::{Graph, Var};

use crate::error::{Error, Result};

/// A dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The two dimensions of a matrix, or a dimension error.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected 2-D tensor, got {s:?}"))),
        }
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected scalar, tensor has {} elements",
                self.data.len()
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convenience forward-only selective scan on plain tensors.
///
/// See [`Graph::selective_scan`] for the differentiable version and the
/// recurrence definition.
pub fn selective_scan(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    skip: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = [u, delta, a, b, c, skip].map(|t| g.constant(t.clone()));
    let out = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?;
    Ok(g.value(out).clone())
}

/// Convenience forward-only causal depthwise convolution.
pub fn causal_depthwise_conv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let out = g.causal_depthwise_conv(xv, wv)?;
    Ok(g.value(out).clone())
}
