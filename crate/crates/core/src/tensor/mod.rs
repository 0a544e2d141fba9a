//! Dense f64 tensors and the reverse-mode graph built on top of them.
//!
//! `Tensor` is a plain row-major buffer with an optional gradient buffer.
//! All differentiable computation goes through [`graph::Graph`], a tape that
//! owns every intermediate value; `Tensor` itself carries no graph pointers,
//! so whole parameter sets can be cloned, serialized, or moved across
//! threads freely.

pub mod graph;
pub mod gradcheck;
pub mod io;
pub mod optim;
pub mod schedule;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    /// Gradient accumulator, same length as `data`. Present iff a backward
    /// pass has reached this tensor or the caller allocated it.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::dim("tensor construction", "rank >= 1", "rank 0"));
        }
        if numel != data.len() {
            return Err(Error::dim(
                "tensor construction",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let c_dim = self.shape[1];
        self.data[r * c_dim + c] = v;
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (non-differentiable) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(Error::dim(
                "matmul",
                format!("[n,k] x [k,m], lhs {:?}", self.shape),
                format!("rhs {:?}", other.shape),
            ));
        }
        let (n, k, m) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; n * m];
        matmul_accum(&self.data, &other.data, n, k, m, &mut out);
        Tensor::from_vec(vec![n, m], out)
    }

    /// Plain transpose of a rank-2 tensor.
    pub fn transposed(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out, requires_grad: false, grad: None }
    }

    /// Row-wise softmax of a rank-2 tensor, without tape involvement.
    pub fn softmax_rows(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            softmax_slice(row, dst);
        }
        Tensor { shape: vec![r, c], data: out, requires_grad: false, grad: None }
    }
}

/// out[n,m] += a[n,k] @ b[k,m]. Loop order keeps the inner traversal
/// contiguous in both b and out.
pub(crate) fn matmul_accum(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for j in 0..m {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// Stable softmax of one lane into `dst`.
pub(crate) fn softmax_slice(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = (s - max).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}
