//! Dense tensors with a reverse-mode autograd tape, the Adam optimizer and a
//! finite-difference gradient checker.
//!
//! Values are stored as `f64`. A [`Graph`] running in [`Precision::F32`]
//! rounds every op output to the nearest `f32`, which is how training runs;
//! gradient checking switches the whole tape to [`Precision::F64`].

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_many, finite_diff_check_with, CheckOptions,
    GradCheckReport, REL_ERROR_FLOOR,
};
pub(crate) use graph::mix64;
pub use graph::{conv_out_hw, Graph, LossReduction, Precision, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{bind_tree, ParamId, ParamStore, ParamTree};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("positive extents")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full([1], value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new([rows.len(), cols], rows.concat())
    }

    /// Samples every element from `uniform(-bound, bound)`, rounded to `f32`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for x in &mut t.data {
            *x = round_f32(rng.gen_range(-bound..=bound));
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Option<Vec<f64>> {
        &mut self.grad
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.shape.last().unwrap()
    }

    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = round_f32(*x);
        }
    }
}

/// Point-wise (1×1) convolution of an `H×W×Cin` map: a per-position linear
/// map, computed as a flatten, matmul, bias-add and reshape.
pub fn pointwise_conv(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let (h, wd, cin) = match g.shape(x) {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::shape("pointwise_conv", s, g.shape(w))),
    };
    if g.shape(w).len() != 2 || g.shape(w)[0] != cin {
        return Err(Error::shape("pointwise_conv", g.shape(x), g.shape(w)));
    }
    let cout = g.shape(w)[1];
    let flat = g.reshape(x, &[h * wd, cin])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_row(y, b)?;
    g.reshape(y, &[h, wd, cout])
}

#[inline]
pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}
