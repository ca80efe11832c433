use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss and the `(N, 1, 1, K)` class probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let n = logits.shape().n();
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let k = logits.len() / n;
    let mut probs = Tensor::zeros(logits.shape());
    let mut loss = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = &logits.data()[b * k..(b + 1) * k];
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let log_sum = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (p, &v) in probs.data_mut()[b * k..(b + 1) * k].iter_mut().zip(z) {
            *p = (v - log_sum).exp();
        }
        loss += log_sum - z[label];
    }
    let loss = loss / T::of_usize(n);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax cross-entropy" });
    }
    Ok((loss, probs))
}

/// Gradient of the mean loss with respect to the logits, scaled by `upstream`.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Tensor<T> {
    let n = labels.len();
    let k = probs.len() / n;
    let scale = upstream / T::of_usize(n);
    let mut d = probs.clone();
    for (b, &label) in labels.iter().enumerate() {
        d.data_mut()[b * k + label] -= T::one();
    }
    d.data_mut().iter_mut().for_each(|v| *v *= scale);
    d
}
