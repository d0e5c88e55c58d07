//! Dense 4-D tensors in (batch, channels, height, width) layout.
//!
//! Storage is generic over [`Real`] so the same layer code runs in `f32` for
//! training and inference, and in `f64` where finite-difference checks need
//! the extra headroom. Reductions always accumulate in `f64`.

use std::fmt::{self, Debug};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar storage type for tensors.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements per batch item.
    pub const fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape("Tensor::from_vec", "data length", data.len(), shape.numel()));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// A (1, n, 1, 1) tensor holding a flat vector.
    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Tensor {
            shape: Shape::new(1, n, 1, 1),
            data,
            grad: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated zeroed on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data viewed under a new shape with identical element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape("Tensor::reshape", "element count", shape.numel(), self.shape.numel()));
        }
        self.shape = shape;
        Ok(self)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous slice of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copy of one batch item as a batch-1 tensor.
    pub fn item_tensor(&self, n: usize) -> Tensor<T> {
        let s = self.shape;
        Tensor {
            shape: Shape::new(1, s.channels, s.height, s.width),
            data: self.item(n).to_vec(),
            grad: None,
        }
    }

    /// Stack batch-1 tensors of identical per-item shape.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list of tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.item_len() * items.len());
        let mut batch = 0;
        for t in items {
            let s = t.shape;
            if (s.channels, s.height, s.width) != (first.channels, first.height, first.width) {
                return Err(Error::shape("Tensor::stack", "item size", s.item_len(), first.item_len()));
            }
            batch += s.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(batch, first.channels, first.height, first.width),
            data,
            grad: None,
        })
    }

    /// Spatial crop `[y0, y1) x [x0, x1)` across all items and channels.
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Self> {
        let s = self.shape;
        if y1 > s.height || x1 > s.width || y0 >= y1 || x0 >= x1 {
            return Err(Error::invalid(format!(
                "crop [{y0},{y1})x[{x0},{x1}) out of bounds for {s}"
            )));
        }
        let (oh, ow) = (y1 - y0, x1 - x0);
        let mut data = Vec::with_capacity(s.batch * s.channels * oh * ow);
        for n in 0..s.batch {
            for c in 0..s.channels {
                for y in y0..y1 {
                    let start = self.index(n, c, y, x0);
                    data.extend_from_slice(&self.data[start..start + ow]);
                }
            }
        }
        Ok(Tensor {
            shape: Shape::new(s.batch, s.channels, oh, ow),
            data,
            grad: None,
        })
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        let mut out = self.data.clone();
        for row in out.chunks_mut(s.width.max(1)) {
            row.reverse();
        }
        Tensor {
            shape: s,
            data: out,
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}
