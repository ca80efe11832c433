//! Direct 2-D convolution over NHWC activations.
//!
//! Implemented as cross-correlation: `out(n,i,j,o) = Σ_c Σ_r Σ_q K(r,q,c,o) ·
//! I(n, i·stride + r − pad, j·stride + q − pad, c)`, with zero padding. A
//! flipped-index convolution is the same family of maps under a 180° kernel
//! rotation, so nothing downstream depends on the choice.
//!
//! Every output element is reduced channel-major, then over kernel rows, then
//! kernel columns. Masked variants visit the same sequence with inactive
//! channels removed, which makes an all-ones mask bit-identical to the plain
//! convolution.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Kernel, Shape4, Tensor};

/// Geometry shared by forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape4,
    pub kernel: Shape4,
    pub stride: usize,
    pub padding: usize,
    pub output: Shape4,
}

impl ConvGeometry {
    pub fn new(input: Shape4, kernel: Shape4, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Invalid("convolution stride must be positive".into()));
        }
        let (rows, cols, c_in, c_out) = (kernel.n(), kernel.h(), kernel.w(), kernel.c());
        if input.c() != c_in {
            return Err(Error::Shape(format!(
                "input has {} channels, kernel expects {c_in}",
                input.c()
            )));
        }
        let (ph, pw) = (input.h() + 2 * padding, input.w() + 2 * padding);
        if ph < rows || pw < cols {
            return Err(Error::Shape(format!(
                "padded input {ph}x{pw} smaller than kernel {rows}x{cols}"
            )));
        }
        let output = Shape4::new(input.n(), (ph - rows) / stride + 1, (pw - cols) / stride + 1, c_out);
        Ok(ConvGeometry { input, kernel, stride, padding, output })
    }

    /// Input coordinate read by output row/col `o` at kernel offset `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&v| v < extent)
    }
}

fn accumulate_forward<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    active: impl Fn(usize) -> bool,
) -> Vec<T> {
    let ConvGeometry { input: is, kernel: ks, output: os, .. } = *geo;
    let (rows, cols, c_in, c_out) = (ks.n(), ks.h(), ks.w(), ks.c());
    let mut out = vec![T::zero(); os.len()];
    for n in 0..os.n() {
        for oi in 0..os.h() {
            for oj in 0..os.w() {
                let base = os.index(n, oi, oj, 0);
                let acc = &mut out[base..base + c_out];
                for c in (0..c_in).filter(|&c| active(c)) {
                    for r in 0..rows {
                        let Some(ii) = geo.source(oi, r, is.h()) else { continue };
                        for q in 0..cols {
                            let Some(jj) = geo.source(oj, q, is.w()) else { continue };
                            let x = input[is.index(n, ii, jj, c)];
                            let k0 = ((r * cols + q) * c_in + c) * c_out;
                            for (a, &k) in acc.iter_mut().zip(&kernel[k0..k0 + c_out]) {
                                *a += k * x;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Plain convolution. The activation is applied by a separate op.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Kernel<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), kernel.tensor().shape(), stride, padding)?;
    input.ensure_finite("conv2d input")?;
    kernel.tensor().ensure_finite("conv2d kernel")?;
    let out = accumulate_forward(&geo, input.data(), kernel.tensor().data(), |_| true);
    Tensor::from_vec(geo.output, out)
}

/// Switch-gated convolution: `out = Σ_c s_c · φ_c`. Channels with `s_c = 0`
/// are never read.
pub fn masked_conv_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Kernel<T>,
    switches: &[bool],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape(), kernel.tensor().shape(), stride, padding)?;
    if switches.len() != kernel.c_in() {
        return Err(Error::Shape(format!(
            "{} switches for {} input channels",
            switches.len(),
            kernel.c_in()
        )));
    }
    input.ensure_finite("masked conv input")?;
    kernel.tensor().ensure_finite("masked conv kernel")?;
    let out = accumulate_forward(&geo, input.data(), kernel.tensor().data(), |c| switches[c]);
    Tensor::from_vec(geo.output, out)
}

/// Which gradients a backward call should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConvGradRequest {
    pub input: bool,
    pub kernel: bool,
    pub switches: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub switches: Option<Vec<T>>,
}

/// Backward pass of the relaxed gated convolution `Σ_c s_c φ_c` with
/// continuous `s`. A plain convolution is the case `s ≡ 1`.
///
/// The switch gradient `⟨upstream, φ_c⟩` is produced for every channel,
/// including inactive ones, so that dead switches keep receiving signal.
pub(crate) fn gated_conv_backward<T: Scalar>(
    geo: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    gate: &[T],
    upstream: &[T],
    want: ConvGradRequest,
) -> ConvGrads<T> {
    let ConvGeometry { input: is, kernel: ks, output: os, .. } = *geo;
    let (rows, cols, c_in, c_out) = (ks.n(), ks.h(), ks.w(), ks.c());
    let need_corr = want.kernel || want.switches;
    let mut d_input = want.input.then(|| vec![T::zero(); is.len()]);
    // corr(r,q,c,o) = Σ_{n,i,j} I(...) · upstream(n,i,j,o): the kernel gradient at s ≡ 1.
    let mut corr = need_corr.then(|| vec![T::zero(); ks.len()]);

    for n in 0..os.n() {
        for oi in 0..os.h() {
            for oj in 0..os.w() {
                let base = os.index(n, oi, oj, 0);
                let g = &upstream[base..base + c_out];
                for c in 0..c_in {
                    let s = gate[c];
                    let input_live = s != T::zero();
                    for r in 0..rows {
                        let Some(ii) = geo.source(oi, r, is.h()) else { continue };
                        for q in 0..cols {
                            let Some(jj) = geo.source(oj, q, is.w()) else { continue };
                            let xi = is.index(n, ii, jj, c);
                            let k0 = ((r * cols + q) * c_in + c) * c_out;
                            if let (Some(di), true) = (d_input.as_mut(), input_live) {
                                let dot: T = kernel[k0..k0 + c_out]
                                    .iter()
                                    .zip(g)
                                    .map(|(&k, &u)| k * u)
                                    .sum();
                                di[xi] += s * dot;
                            }
                            if let Some(cr) = corr.as_mut() {
                                let x = input[xi];
                                for (a, &u) in cr[k0..k0 + c_out].iter_mut().zip(g) {
                                    *a += x * u;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let switches = match (&corr, want.switches) {
        (Some(cr), true) => {
            let mut ds = vec![T::zero(); c_in];
            for (chunk_idx, chunk) in cr.chunks(c_out).enumerate() {
                let c = chunk_idx % c_in;
                let k0 = chunk_idx * c_out;
                ds[c] += chunk.iter().zip(&kernel[k0..k0 + c_out]).map(|(&a, &k)| a * k).sum::<T>();
            }
            Some(ds)
        }
        _ => None,
    };
    let kernel_grad = if want.kernel {
        corr.map(|mut cr| {
            for (chunk_idx, chunk) in cr.chunks_mut(c_out).enumerate() {
                let s = gate[chunk_idx % c_in];
                if s != T::one() {
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
            }
            Tensor::from_vec(ks, cr).expect("kernel-shaped buffer")
        })
    } else {
        None
    };
    ConvGrads {
        input: d_input.map(|d| Tensor::from_vec(is, d).expect("input-shaped buffer")),
        kernel: kernel_grad,
        switches,
    }
}

/// Adjoint of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Kernel<T>,
    stride: usize,
    padding: usize,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let geo = ConvGeometry::new(input.shape(), kernel.tensor().shape(), stride, padding)?;
    if upstream.shape() != geo.output {
        return Err(Error::Shape(format!(
            "upstream gradient {} does not match conv output {}",
            upstream.shape(),
            geo.output
        )));
    }
    let ones = vec![T::one(); kernel.c_in()];
    let grads = gated_conv_backward(
        &geo,
        input.data(),
        kernel.tensor().data(),
        &ones,
        upstream.data(),
        ConvGradRequest { input: true, kernel: true, switches: false },
    );
    Ok((grads.input.unwrap(), grads.kernel.unwrap()))
}
