//! Dense `f64` tensors and the numeric kernels the rest of the toolkit is
//! built from.
//!
//! Feature maps use the canonical `[channels, height, width]` layout;
//! single-channel maps are `[height, width]`. Storage is row-major.
//! Nothing broadcasts implicitly: binary operations require equal shapes,
//! and scalars are passed as plain `f64`.

pub(crate) mod conv;
mod resample;

pub use conv::{
    channel_mix, channel_mix_backward, conv2d, conv2d_backward, gemm, reflect_index, ConvSpec,
    PadMode, Padding,
};
pub use resample::{
    bilinear_upsample_x2, max_pool2, max_pool2_backward, resize_bilinear, resize_bilinear_backward,
    MaxPoolIndices,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected [C, H, W], got {:?}",
                self.shape
            ))),
        }
    }

    /// `(height, width)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(format!(
                "expected [H, W], got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn at3(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.shape[1] + row) * self.shape[2] + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// `max(x, 0)`.
    pub fn relu(&self) -> Self {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "operands have shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Copies the `[rows, cols]` window at `(top, left)` out of a rank-2 map.
    pub fn crop2(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        let (h, w) = self.dims2()?;
        if top + rows > h || left + cols > w {
            return Err(Error::shape(format!(
                "crop {rows}x{cols} at ({top}, {left}) exceeds map {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in top..top + rows {
            data.extend_from_slice(&self.data[r * w + left..r * w + left + cols]);
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Concatenates rank-3 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (_, h, w) = first.dims3()?;
        let mut channels = 0;
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!(
                    "concat: spatial size {ph}x{pw} differs from {h}x{w}"
                )));
            }
            channels += c;
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![channels, h, w],
            data,
        })
    }
}

/// Pointwise operations exposed through [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
}

/// Second operand of an [`elementwise`] call.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Constant(f64),
    None,
}

/// Applies a pointwise operation. Tensor operands must match `a`'s shape
/// exactly; constants apply to every element.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
    match (op, b) {
        (ElementwiseOp::Relu, _) => Ok(a.relu()),
        (ElementwiseOp::Scale, Operand::Constant(c)) => Ok(a.scale(c)),
        (ElementwiseOp::Add, Operand::Tensor(t)) => a.add(t),
        (ElementwiseOp::Sub, Operand::Tensor(t)) => a.sub(t),
        (ElementwiseOp::Mul, Operand::Tensor(t)) => a.mul(t),
        (ElementwiseOp::Add, Operand::Constant(c)) => Ok(a.map(|v| v + c)),
        (ElementwiseOp::Sub, Operand::Constant(c)) => Ok(a.map(|v| v - c)),
        (ElementwiseOp::Mul, Operand::Constant(c)) => Ok(a.scale(c)),
        (op, b) => Err(Error::invalid(format!(
            "operand {b:?} is not valid for {op:?}"
        ))),
    }
}
