//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use ba2::{NodeId, Shape4, Tape64, Tensor64};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries near zero are judged absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Central differences of `f` at `x`.
pub fn fd_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks every input gradient of a tape-built function against finite
/// differences of `⟨seed, output⟩`. Returns the worst relative error.
pub fn vjp_check(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor64],
    build: impl Fn(&mut Tape64, &[NodeId]) -> NodeId,
) -> f64 {
    let mut tape = Tape64::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let seed = random_tensor(rng, tape.value(out).unwrap().shape(), -1.0, 1.0);
    tape.backward_from(out, seed.clone()).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[i]).unwrap().data().to_vec();
        let numeric = fd_grad(input.data(), |probe| {
            let mut t = Tape64::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    if j == i {
                        t.param(Tensor64::from_vec(x.shape(), probe.to_vec()).unwrap())
                    } else {
                        t.param(x.clone())
                    }
                })
                .collect();
            let out = build(&mut t, &ids);
            dot(t.value(out).unwrap().data(), seed.data())
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Loop-nest cross-correlation over an explicitly zero-padded copy of the
/// input, with each input channel scaled by `gate[c]`. Channels with a zero
/// gate are skipped entirely. Also returns the number of multiplies plus adds
/// executed.
pub fn loop_nest_conv(
    input: &Tensor64,
    kernel: &Tensor64,
    gate: &[f64],
    stride: usize,
    pad: usize,
) -> (Tensor64, u64) {
    let s = input.shape();
    let (rows, cols, c_in, c_out) = (kernel.shape().n(), kernel.shape().h(), kernel.shape().w(), kernel.shape().c());
    let (ph, pw) = (s.h() + 2 * pad, s.w() + 2 * pad);
    let padded = Tensor64::from_fn(Shape4::new(s.n(), ph, pw, c_in), |idx| {
        let c = idx % c_in;
        let q = (idx / c_in) % pw;
        let r = (idx / (c_in * pw)) % ph;
        let n = idx / (c_in * pw * ph);
        if r < pad || q < pad || r - pad >= s.h() || q - pad >= s.w() {
            0.0
        } else {
            input.at(n, r - pad, q - pad, c)
        }
    });
    let (oh, ow) = ((ph - rows) / stride + 1, (pw - cols) / stride + 1);
    let mut out = Tensor64::zeros(Shape4::new(s.n(), oh, ow, c_out));
    let mut ops = 0u64;
    for n in 0..s.n() {
        for i in 0..oh {
            for j in 0..ow {
                for o in 0..c_out {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        if gate[c] == 0.0 {
                            continue;
                        }
                        for r in 0..rows {
                            for q in 0..cols {
                                acc += gate[c] * padded.at(n, i * stride + r, j * stride + q, c) * kernel.at(r, q, c, o);
                                ops += 2;
                            }
                        }
                    }
                    *out.at_mut(n, i, j, o) = acc;
                }
            }
        }
    }
    (out, ops)
}

pub fn gate_values(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}
