//! Dense rank-4 tensors in (batch, height, width, channel) order.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense 4-D array, row-major over `(n, h, w, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    for c in 0..dims[3] {
                        data.push(f(n, h, w, c));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// A 1×1×1×1 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            dims: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.dims == [1, 1, 1, 1]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.dims[1] + h) * self.dims[2] + w) * self.dims[3] + c
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> T {
        self.data[self.offset(n, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, value: T) {
        let i = self.offset(n, h, w, c);
        self.data[i] = value;
    }

    /// Contiguous channel vector at one spatial position.
    pub fn pixel(&self, n: usize, h: usize, w: usize) -> &[T] {
        let start = self.offset(n, h, w, 0);
        &self.data[start..start + self.dims[3]]
    }

    /// One sample of the batch as an `1×h×w×c` tensor.
    pub fn sample(&self, n: usize) -> Self {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let [_, h, w, c] = first.dims;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.dims[1..] != [h, w, c] {
                return Err(Error::shape(format!(
                    "cannot stack {:?} onto {:?}",
                    p.dims, first.dims
                )));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            dims: [n, h, w, c],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Zero-padding convention for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output extent `ceil(extent / stride)`; odd padding totals put the
    /// extra zero on the bottom/right edge.
    Same,
}

/// Convolution filter bank with weights laid out `(kh, kw, in_c, out_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weights: Tensor4<T>, bias: Vec<T>, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        if bias.len() != weights.dims()[3] {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                weights.dims()[3]
            )));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(kh: usize, kw: usize, in_c: usize, out_c: usize, stride: usize, padding: Padding) -> Self {
        Self {
            weights: Tensor4::zeros([kh, kw, in_c, out_c]),
            bias: vec![T::zero(); out_c],
            stride,
            padding,
        }
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weights.dims()[0], self.weights.dims()[1])
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[3]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}
