//! Dense f64 tensors with a recorded tape for reverse-mode gradients.
//!
//! [`Tensor`] is an immutable row-major value. Differentiable computation is
//! recorded on a [`Graph`]; parameters live in a [`ParamStore`] and are pulled
//! into a graph by name. Gradients flow back through explicit per-op rules.

mod gradcheck;
mod graph;
mod nn;
mod optim;
mod params;

pub use gradcheck::{check_gradients, grad_check, GradCheckReport, ParamCheck, GRAD_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::{focal_term, sigmoid, softplus};
pub use nn::{
    attention, init_attention, init_layer_norm, init_linear, init_mlp, layer_norm, linear,
    mlp_apply, Activation, AttentionOutput, AttentionSpec, LinearInit, MlpSpec,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{load_checkpoint, save_checkpoint, Checkpoint, ParamId, ParamStore};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn scalar(x: f64) -> Result<Self> {
        Self::matrix(1, 1, vec![x])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Internal constructor for op results; finiteness is checked where it matters
    /// (loss values, optimizer updates) rather than on every intermediate.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// (rows, cols) view of a rank-1 or rank-2 tensor; rank-1 is a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape("dims2", format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(0, |d| d.0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(0, |d| d.1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor::raw(vec![idx.len(), c], out)
    }
}

/// Numerically stable softmax along `axis` of a rank-1 or rank-2 tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let rank = x.shape().len();
    let along_rows = match (rank, axis) {
        (1, 0) | (2, 1) => true,
        (2, 0) => false,
        _ => return Err(Error::InvalidArgument(format!("softmax axis {axis} for rank {rank}"))),
    };
    let (outer, inner) = if along_rows { (r, c) } else { (c, r) };
    if inner == 0 {
        return Err(Error::Empty("softmax over an empty axis".into()));
    }
    let mut out = x.data().to_vec();
    for o in 0..outer {
        let at = |k: usize| if along_rows { o * c + k } else { k * c + o };
        let m = (0..inner).map(|k| x.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..inner {
            let e = (x.data()[at(k)] - m).exp();
            out[at(k)] = e;
            z += e;
        }
        for k in 0..inner {
            out[at(k)] /= z;
        }
    }
    Ok(Tensor::raw(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::row_vector(vec![0.0, 0.0]).unwrap(), 1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::row_vector(vec![2f64.ln(), 0.0]).unwrap(), 1).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&Tensor::row_vector(vec![1000.0, 1000.0]).unwrap(), 1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_axis_zero_and_errors() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(softmax(&x, 2).is_err());
        let empty = Tensor::new(vec![2, 0], vec![]).unwrap();
        assert!(matches!(softmax(&empty, 1), Err(Error::Empty(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_simplex(vals in prop::collection::vec(-50.0f64..50.0, 12), offset in -1e3f64..1e3) {
            let shifted: Vec<f64> = vals.iter().map(|v| v + offset).collect();
            let x = Tensor::matrix(3, 4, shifted).unwrap();
            let s = softmax(&x, 1).unwrap();
            for r in 0..3 {
                let row = s.row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
