use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Window and stride of an unpadded pooling op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolWindow {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
}

impl PoolWindow {
    pub fn square(size: usize, stride: usize) -> Self {
        PoolWindow { rows: size, cols: size, stride }
    }

    /// A window covering the whole spatial extent of `shape`.
    pub fn global(shape: Shape4) -> Self {
        PoolWindow { rows: shape.h(), cols: shape.w(), stride: 1 }
    }

    pub fn output(&self, input: Shape4) -> Result<Shape4> {
        if self.stride == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::Invalid("pooling window and stride must be positive".into()));
        }
        if self.rows > input.h() || self.cols > input.w() {
            return Err(Error::Shape(format!(
                "pooling window {}x{} larger than input {}x{}",
                self.rows,
                self.cols,
                input.h(),
                input.w()
            )));
        }
        Ok(Shape4::new(
            input.n(),
            (input.h() - self.rows) / self.stride + 1,
            (input.w() - self.cols) / self.stride + 1,
            input.c(),
        ))
    }
}

pub fn avgpool2d_forward<T: Scalar>(input: &Tensor<T>, win: PoolWindow) -> Result<Tensor<T>> {
    let is = input.shape();
    let os = win.output(is)?;
    let scale = T::one() / T::of_usize(win.rows * win.cols);
    let mut out = Tensor::zeros(os);
    for n in 0..os.n() {
        for i in 0..os.h() {
            for j in 0..os.w() {
                for r in 0..win.rows {
                    for q in 0..win.cols {
                        let src = is.index(n, i * win.stride + r, j * win.stride + q, 0);
                        let dst = os.index(n, i, j, 0);
                        for c in 0..is.c() {
                            out.data_mut()[dst + c] += input.data()[src + c];
                        }
                    }
                }
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

pub fn avgpool2d_backward<T: Scalar>(input_shape: Shape4, win: PoolWindow, upstream: &Tensor<T>) -> Tensor<T> {
    let os = upstream.shape();
    let scale = T::one() / T::of_usize(win.rows * win.cols);
    let mut d = Tensor::zeros(input_shape);
    for n in 0..os.n() {
        for i in 0..os.h() {
            for j in 0..os.w() {
                let src = os.index(n, i, j, 0);
                for r in 0..win.rows {
                    for q in 0..win.cols {
                        let dst = input_shape.index(n, i * win.stride + r, j * win.stride + q, 0);
                        for c in 0..os.c() {
                            d.data_mut()[dst + c] += upstream.data()[src + c] * scale;
                        }
                    }
                }
            }
        }
    }
    d
}

/// Returns the pooled tensor and the flat input index chosen for each output.
pub fn maxpool2d_forward<T: Scalar>(input: &Tensor<T>, win: PoolWindow) -> Result<(Tensor<T>, Vec<usize>)> {
    let is = input.shape();
    let os = win.output(is)?;
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.len()];
    for n in 0..os.n() {
        for i in 0..os.h() {
            for j in 0..os.w() {
                for c in 0..is.c() {
                    let mut best = is.index(n, i * win.stride, j * win.stride, c);
                    for r in 0..win.rows {
                        for q in 0..win.cols {
                            let k = is.index(n, i * win.stride + r, j * win.stride + q, c);
                            if input.data()[k] > input.data()[best] {
                                best = k;
                            }
                        }
                    }
                    let o = os.index(n, i, j, c);
                    out.data_mut()[o] = input.data()[best];
                    argmax[o] = best;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(input_shape: Shape4, argmax: &[usize], upstream: &Tensor<T>) -> Tensor<T> {
    let mut d = Tensor::zeros(input_shape);
    for (&src, &g) in argmax.iter().zip(upstream.data()) {
        d.data_mut()[src] += g;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_small_grid() {
        let x = Tensor::from_vec(Shape4::new(1, 2, 2, 1), vec![1.0, 4.0, -2.0, 3.0]).unwrap();
        let avg = avgpool2d_forward(&x, PoolWindow::square(2, 2)).unwrap();
        assert_eq!(avg.data(), &[1.5]);
        let (mx, arg) = maxpool2d_forward(&x, PoolWindow::square(2, 2)).unwrap();
        assert_eq!(mx.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
        let g = Tensor::scalar(2.0);
        assert_eq!(maxpool2d_backward(x.shape(), &arg, &g).data(), &[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(avgpool2d_backward(x.shape(), PoolWindow::square(2, 2), &g).data(), &[0.5; 4]);
    }

    #[test]
    fn window_larger_than_input() {
        let x = Tensor::<f32>::zeros(Shape4::new(1, 2, 2, 1));
        assert!(avgpool2d_forward(&x, PoolWindow::square(3, 1)).is_err());
        assert!(maxpool2d_forward(&x, PoolWindow::square(3, 1)).is_err());
    }
}
