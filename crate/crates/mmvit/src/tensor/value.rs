use std::sync::Arc;

use crate::scalar::Scalar;

use super::{kernels, Result, TensorError};

/// Dense N-dimensional array, row-major, with an optional gradient.
///
/// The data buffer is behind an `Arc`, so clones share storage and tensors
/// are freely shareable across threads once built. `data_mut` copies on
/// write when the buffer is shared.
#[derive(Clone, Debug)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    requires_grad: bool,
    grad: Option<Box<Tensor<F>>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![F::zero(); n]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; n]),
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = F::one();
        }
        Self::from_vec(vec![n, n], data).expect("eye shape")
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable view of the buffer; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Value of a rank-0 / single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&Tensor<F>> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulates `g` into this tensor's gradient (`+=`), creating it if
    /// absent. Callers zero gradients between optimizer steps.
    pub fn accumulate_grad(&mut self, g: &Tensor<F>) -> Result<()> {
        if g.shape != self.shape {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        match &mut self.grad {
            Some(acc) => {
                let dst = acc.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d = *d + *s;
                }
            }
            None => self.grad = Some(Box::new(g.clone().requires_grad(false))),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise cast to another element type. Drops any gradient.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        let data: Vec<G> = self.data.iter().map(|v| G::from_f64(v.as_f64())).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: self.numel(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: false,
            grad: None,
        })
    }

    /// Arithmetic mean over one axis, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "mean_axis",
                axis,
                rank: self.rank(),
            });
        }
        let n = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![F::zero(); outer * inner];
        let inv = F::from_f64(1.0 / n as f64);
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + self.data[base + i] * inv;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::from_vec(shape, out)
    }

    /// Linear interpolation along `axis` to `new_len` points, endpoints
    /// aligned. Identity (bit-exact copy) when `new_len` equals the
    /// current extent.
    pub fn interp_linear_1d(&self, axis: usize, new_len: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "interp_linear_1d",
                axis,
                rank: self.rank(),
            });
        }
        let (out, shape) =
            kernels::interp_linear_1d(&self.data, &self.shape, axis, new_len)?;
        Tensor::from_vec(shape, out)
    }

    /// Bilinear interpolation over the last two axes, endpoints aligned.
    pub fn interp_bilinear_2d(&self, new_h: usize, new_w: usize) -> Result<Self> {
        let (out, shape) = kernels::interp_bilinear_2d(&self.data, &self.shape, new_h, new_w)?;
        Tensor::from_vec(shape, out)
    }
}
