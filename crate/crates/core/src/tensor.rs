use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a rank-4 array, outermost first.
///
/// Activations use `(batch, height, width, channels)`; convolution kernels
/// reuse the same storage as `(rows, cols, in_channels, out_channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4(pub [usize; 4]);

impl Shape4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape4([n, h, w, c])
    }

    pub fn vector(len: usize) -> Self {
        Shape4([1, 1, 1, len])
    }

    pub fn scalar() -> Self {
        Shape4([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn h(&self) -> usize {
        self.0[1]
    }
    pub fn w(&self) -> usize {
        self.0[2]
    }
    pub fn c(&self) -> usize {
        self.0[3]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * self.0[1] + h) * self.0[2] + w) * self.0[3] + c
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a}x{b}x{c}x{d}")
    }
}

/// Dense row-major rank-4 array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape} ({} expected)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor { shape, data: (0..shape.len()).map(&mut f).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape4::scalar(), data: vec![value] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: Shape4::vector(data.len()), data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> T {
        self.data[self.shape.index(n, h, w, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, h: usize, w: usize, c: usize) -> &mut T {
        let i = self.shape.index(n, h, w, c);
        &mut self.data[i]
    }

    /// Reinterprets the buffer under a new shape of equal size.
    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Rows `[start, end)` of the batch axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Self {
        let per = self.shape.h() * self.shape.w() * self.shape.c();
        Tensor {
            shape: Shape4::new(end - start, self.shape.h(), self.shape.w(), self.shape.c()),
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    /// Gathers batch rows by index.
    pub fn gather_batch(&self, rows: &[usize]) -> Self {
        let per = self.shape.h() * self.shape.w() * self.shape.c();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        Tensor { shape: Shape4::new(rows.len(), self.shape.h(), self.shape.w(), self.shape.c()), data }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}

/// Convolution weights of shape `(2K_h+1, 2K_w+1, C_in, C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<T>(Tensor<T>);

impl<T: Scalar> Kernel<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.n() % 2 == 0 || s.h() % 2 == 0 {
            return Err(Error::Shape(format!("kernel spatial extents must be odd, got {s}")));
        }
        if s.w() == 0 || s.c() == 0 {
            return Err(Error::Shape(format!("kernel has an empty channel axis: {s}")));
        }
        Ok(Kernel(tensor))
    }

    pub fn zeros(rows: usize, cols: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(Tensor::zeros(Shape4::new(rows, cols, c_in, c_out)))
    }

    pub fn rows(&self) -> usize {
        self.0.shape().n()
    }
    pub fn cols(&self) -> usize {
        self.0.shape().h()
    }
    pub fn c_in(&self) -> usize {
        self.0.shape().w()
    }
    pub fn c_out(&self) -> usize {
        self.0.shape().c()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}
