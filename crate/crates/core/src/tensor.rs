//! Dense row-major n-dimensional arrays.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Real;

/// Immutable-by-convention dense array. Every constructor and every fallible
/// operation rejects NaN and infinities.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

pub(crate) fn ensure_finite<F: Real>(data: &[F], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(Self { shape, data })
    }

    /// Builds from `f64` values, rounding to the element type.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::of(v)).collect())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn from_checked(shape: Vec<usize>, data: Vec<F>, op: &'static str) -> Result<Self> {
        ensure_finite(&data, op)?;
        Ok(Self::from_parts(shape, data))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::one())
    }

    /// Panics on a zero extent.
    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("positive extents");
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// First element; the value of a one-element tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("row range {start}..{end} out of bounds"),
            });
        }
        let row_len = self.data.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(
            shape,
            self.data[start * row_len..end * row_len].to_vec(),
        ))
    }

    /// Stacks tensors along the leading axis; trailing extents must agree.
    pub fn concat_rows(parts: &[Tensor<F>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_checked(self.shape.clone(), data, op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: F) -> Result<Self> {
        Self::from_checked(
            self.shape.clone(),
            self.data.iter().map(|&v| v * s).collect(),
            "scale",
        )
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> Self {
        self.map(sign)
    }

    pub fn clamp(&self, lo: F, hi: F) -> Self {
        self.map(|v| clamp(v, lo, hi))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn sum(&self) -> F {
        self.data.iter().fold(F::zero(), |a, &b| a + b)
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |a, &b| a.max(b.abs()))
    }

    /// `‖self − other‖∞` evaluated in `f64`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let out = kernels::matmul(&self.data, &other.data, m, k, n);
        Self::from_checked(vec![m, n], out, "matmul")
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[F, C, kh, kw]` kernel.
    pub fn conv2d(&self, kernel: &Self, stride: usize, padding: usize) -> Result<Self> {
        let g = conv_geometry(&self.shape, &kernel.shape, stride, padding)?;
        let out = kernels::conv2d_forward(&self.data, &kernel.data, &g);
        Self::from_checked(vec![g.batch, g.filters, g.out_h, g.out_w], out, "conv2d")
    }

    pub fn maxpool2x2(&self) -> Result<Self> {
        let (planes, h, w) = pool_dims(&self.shape)?;
        let (out, _) = kernels::maxpool2x2_forward(&self.data, planes, h, w);
        let mut shape = self.shape.clone();
        let nd = shape.len();
        shape[nd - 2] = h / 2;
        shape[nd - 1] = w / 2;
        Ok(Self::from_parts(shape, out))
    }

    /// Adds `bias[D]` to every row of a `[N, D]` tensor.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let d = bias_rows_dims(&self.shape, &bias.shape)?;
        let mut data = self.data.clone();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        Self::from_checked(self.shape.clone(), data, "add_bias")
    }

    /// Adds `bias[C]` to every plane of a `[N, C, H, W]` tensor.
    pub fn add_channel_bias(&self, bias: &Self) -> Result<Self> {
        let (c, plane) = channel_bias_dims(&self.shape, &bias.shape)?;
        let mut data = self.data.clone();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let b = bias.data[i % c];
            for v in chunk {
                *v = *v + b;
            }
        }
        Self::from_checked(self.shape.clone(), data, "add_channel_bias")
    }
}

#[inline]
pub(crate) fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

#[inline]
pub(crate) fn clamp<F: Real>(v: F, lo: F, hi: F) -> F {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn conv_geometry(
    x: &[usize],
    k: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let bad = |reason: String| Error::InvalidGeometry {
        op: "conv2d",
        reason,
    };
    if x.len() != 4 || k.len() != 4 {
        return Err(bad(format!("expected 4-d input and kernel, got {x:?} and {k:?}")));
    }
    if x[1] != k[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.to_vec(),
            right: k.to_vec(),
        });
    }
    if stride == 0 {
        return Err(bad("stride must be positive".into()));
    }
    let (h, w) = (x[2] + 2 * pad, x[3] + 2 * pad);
    if k[2] > h || k[3] > w {
        return Err(bad(format!(
            "kernel {}x{} larger than padded input {h}x{w}",
            k[2], k[3]
        )));
    }
    Ok(ConvGeometry {
        batch: x[0],
        channels: x[1],
        height: x[2],
        width: x[3],
        filters: k[0],
        kh: k[2],
        kw: k[3],
        stride,
        pad,
        out_h: (h - k[2]) / stride + 1,
        out_w: (w - k[3]) / stride + 1,
    })
}

pub(crate) fn pool_dims(x: &[usize]) -> Result<(usize, usize, usize)> {
    if x.len() < 2 {
        return Err(Error::InvalidGeometry {
            op: "maxpool2x2",
            reason: format!("need at least 2 spatial dims, got {x:?}"),
        });
    }
    let (h, w) = (x[x.len() - 2], x[x.len() - 1]);
    if h < 2 || w < 2 {
        return Err(Error::InvalidGeometry {
            op: "maxpool2x2",
            reason: format!("spatial extent {h}x{w} smaller than the window"),
        });
    }
    Ok((x[..x.len() - 2].iter().product(), h, w))
}

pub(crate) fn bias_rows_dims(x: &[usize], b: &[usize]) -> Result<usize> {
    if x.len() != 2 || b.len() != 1 || x[1] != b[0] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            left: x.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(b[0])
}

pub(crate) fn channel_bias_dims(x: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    if x.len() != 4 || b.len() != 1 || x[1] != b[0] {
        return Err(Error::ShapeMismatch {
            op: "add_channel_bias",
            left: x.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok((b[0], x[2] * x[3]))
}
