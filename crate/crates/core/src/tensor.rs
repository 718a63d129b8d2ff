//! Dense row-major tensors of `f64` and the handful of slice kernels the
//! networks are built from.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::DegenerateShape);
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", &[n], &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::vector(vec![x])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

/// Scale `v` to unit L2 norm. Vectors with norm `<= NORM_EPS` come back as
/// zeros so that empty clusters flow through unchanged.
pub fn l2_normalize(v: &Tensor) -> Tensor {
    let n = v.norm();
    if n <= NORM_EPS {
        return Tensor::zeros(v.shape());
    }
    v.map(|x| x / n)
}

/// Vector-Jacobian product of [`l2_normalize`] at input `v` with output `y`.
pub fn l2_normalize_backward(v: &[f64], y: &[f64], grad_y: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n <= NORM_EPS {
        return vec![0.0; v.len()];
    }
    let yg = dot(y, grad_y);
    grad_y
        .iter()
        .zip(y)
        .map(|(g, yi)| (g - yi * yg) / n)
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// `out = W x + b` for row-major `W` of shape `[rows, x.len()]`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += W x` without bias.
pub fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += Wᵀ g` for row-major `W` of shape `[g.len(), out.len()]`.
pub fn matvec_t_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += gr * wv;
        }
    }
}

/// `dW += g xᵀ`.
pub fn outer_acc(g: &[f64], x: &[f64], dw: &mut [f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        for (d, xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += gr * xv;
        }
    }
}

pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
