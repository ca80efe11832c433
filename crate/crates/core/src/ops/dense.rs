use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Fully connected layer. `input` is flattened per batch row to `F` features;
/// `weight` is stored `(1, 1, F, O)` and `bias` holds `O` values.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let n = input.shape().n();
    let features = if n == 0 { 0 } else { input.len() / n };
    let (f, o) = (weight.shape().w(), weight.shape().c());
    if weight.shape().n() != 1 || weight.shape().h() != 1 || f != features || bias.len() != o {
        return Err(Error::Shape(format!(
            "dense weight {} / bias {} incompatible with {features} input features",
            weight.shape(),
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(Shape4::new(n, 1, 1, o));
    let w = weight.data();
    for b in 0..n {
        let x = &input.data()[b * f..(b + 1) * f];
        let y = &mut out.data_mut()[b * o..(b + 1) * o];
        y.copy_from_slice(bias);
        for (k, &xv) in x.iter().enumerate() {
            for (yv, &wv) in y.iter_mut().zip(&w[k * o..(k + 1) * o]) {
                *yv += xv * wv;
            }
        }
    }
    out.ensure_finite("dense")?;
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` keeps the input's shape.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let n = input.shape().n();
    let (f, o) = (weight.shape().w(), weight.shape().c());
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = vec![T::zero(); o];
    let w = weight.data();
    for b in 0..n {
        let x = &input.data()[b * f..(b + 1) * f];
        let g = &upstream.data()[b * o..(b + 1) * o];
        for (db, &gv) in d_bias.iter_mut().zip(g) {
            *db += gv;
        }
        for k in 0..f {
            let wrow = &w[k * o..(k + 1) * o];
            d_input.data_mut()[b * f + k] = wrow.iter().zip(g).map(|(&wv, &gv)| wv * gv).sum();
            for (dw, &gv) in d_weight.data_mut()[k * o..(k + 1) * o].iter_mut().zip(g) {
                *dw += x[k] * gv;
            }
        }
    }
    (d_input, d_weight, d_bias)
}
