//! Forward and backward kernels. These are pure functions; [`crate::tape`]
//! wires them into a reverse-mode graph.

pub mod conv;
pub mod dense;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d_backward, conv2d_forward, masked_conv_forward, ConvGeometry};
pub use dense::{dense_backward, dense_forward};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
pub use norm::{batchnorm_backward, batchnorm_forward, BnCache, BnConfig, Mode, RunningStats};
pub use pool::{avgpool2d_backward, avgpool2d_forward, maxpool2d_backward, maxpool2d_forward, PoolWindow};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(relu)
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let mut d = upstream.clone();
    for (g, &x) in d.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    d
}
