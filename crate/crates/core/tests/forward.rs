mod oracle;

use ba2::ops::{self, BnConfig, PoolWindow, RunningStats};
use ba2::{Kernel64, Mode, Shape4, Tensor64};
use oracle::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut ChaCha8Rng) -> (Tensor64, Kernel64, usize, usize) {
    let size: usize = [1, 3, 5][rng.random_range(0..3)];
    let (c_in, c_out) = (rng.random_range(1..7), rng.random_range(1..5));
    let pad = rng.random_range(0..=size / 2);
    let h = rng.random_range(size.saturating_sub(2 * pad).max(1)..9);
    let w = rng.random_range(size.saturating_sub(2 * pad).max(1)..9);
    let n = rng.random_range(1..3);
    let x = random_tensor(rng, Shape4::new(n, h, w, c_in), -1.0, 1.0);
    let k = Kernel64::new(random_tensor(rng, Shape4::new(size, size, c_in, c_out), -1.0, 1.0)).unwrap();
    (x, k, rng.random_range(1..3), pad)
}

#[test]
fn conv_matches_loop_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (x, k, stride, pad) = random_case(&mut rng);
        let mask: Vec<bool> = (0..k.c_in()).map(|_| rng.random_bool(0.5)).collect();
        let (expected, _) = loop_nest_conv(&x, k.tensor(), &gate_values(&mask), stride, pad);
        let got = ops::masked_conv_forward(&x, &k, &mask, stride, pad).unwrap();
        assert_eq!(got.shape(), expected.shape());
        assert!(max_rel_err(got.data(), expected.data()) < 1e-12);
    }
}

#[test]
fn all_on_mask_is_bit_identical_to_plain_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let (x, k, stride, pad) = random_case(&mut rng);
        let plain = ops::conv2d_forward(&x, &k, stride, pad).unwrap();
        let masked = ops::masked_conv_forward(&x, &k, &vec![true; k.c_in()], stride, pad).unwrap();
        assert_eq!(plain, masked);
    }
}

#[test]
fn inactive_kernel_slices_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (x, k, stride, pad) = random_case(&mut rng);
        let mask: Vec<bool> = (0..k.c_in()).map(|_| rng.random_bool(0.5)).collect();
        let before = ops::masked_conv_forward(&x, &k, &mask, stride, pad).unwrap();
        let mut perturbed = k.clone();
        let (c_in, c_out) = (k.c_in(), k.c_out());
        for (i, v) in perturbed.tensor_mut().data_mut().iter_mut().enumerate() {
            if !mask[(i / c_out) % c_in] {
                *v = rng.random_range(-100.0..100.0);
            }
        }
        assert_eq!(before, ops::masked_conv_forward(&x, &perturbed, &mask, stride, pad).unwrap());
    }
}

#[test]
fn all_off_mask_gives_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, k, stride, pad) = random_case(&mut rng);
    let y = ops::masked_conv_forward(&x, &k, &vec![false; k.c_in()], stride, pad).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_train_normalizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, Shape4::new(4, 3, 3, 3), -5.0, 7.0);
    let mut stats = RunningStats::new(3);
    let (y, _) = ops::batchnorm_forward(&x, &[1.0; 3], &[0.0; 3], &mut stats, Mode::Train, BnConfig::default()).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = y.data().iter().skip(c).step_by(3).copied().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }
}

#[test]
fn eval_mode_uses_running_statistics() {
    let x = Tensor64::from_vec(Shape4::new(1, 1, 1, 2), vec![3.0, -1.0]).unwrap();
    let mut stats = RunningStats { mean: vec![1.0, 1.0], var: vec![4.0, 1.0] };
    let cfg = BnConfig { momentum: 0.1, epsilon: 1e-300 };
    let (y, _) = ops::batchnorm_forward(&x, &[2.0, 1.0], &[0.5, 0.0], &mut stats, Mode::Eval, cfg).unwrap();
    assert_eq!(y.data(), &[2.5, -2.0]);
    assert_eq!(stats.mean, vec![1.0, 1.0]);
}

#[test]
fn pooling_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, Shape4::new(2, 5, 4, 3), -1.0, 1.0);
    let win = PoolWindow::square(2, 2);
    let avg = ops::avgpool2d_forward(&x, win).unwrap();
    let (max, _) = ops::maxpool2d_forward(&x, win).unwrap();
    assert_eq!(avg.shape(), Shape4::new(2, 2, 2, 3));
    for n in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..3 {
                    let window = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(r, q)| x.at(n, 2 * i + r, 2 * j + q, c));
                    let mean = window.iter().sum::<f64>() / 4.0;
                    assert!((avg.at(n, i, j, c) - mean).abs() < 1e-15);
                    assert_eq!(max.at(n, i, j, c), window.iter().copied().fold(f64::MIN, f64::max));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Convolution is linear in its input and in its kernel.
    #[test]
    fn conv_is_bilinear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, k, stride, pad) = random_case(&mut rng);
        let x2 = random_tensor(&mut rng, x.shape(), -1.0, 1.0);
        let mut mix = x.map(|v| a * v);
        mix.axpy(b, &x2);
        let lhs = ops::conv2d_forward(&mix, &k, stride, pad).unwrap();
        let mut rhs = ops::conv2d_forward(&x, &k, stride, pad).unwrap().map(|v| a * v);
        rhs.axpy(b, &ops::conv2d_forward(&x2, &k, stride, pad).unwrap());
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-9);
        }
        let k2 = Kernel64::new(k.tensor().map(|v| a * v)).unwrap();
        let scaled = ops::conv2d_forward(&x, &k2, stride, pad).unwrap();
        let base = ops::conv2d_forward(&x, &k, stride, pad).unwrap();
        for (s, v) in scaled.data().iter().zip(base.data()) {
            prop_assert!((s - a * v).abs() < 1e-9);
        }
    }
}
