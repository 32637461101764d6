mod common;

use common::{max_abs_diff, random_tensor, rng, sq_norm, tensor};
use fmerge_core::spectral::{
    dft_oracle, fft, filter_tensor, filter_tensor_with, ifft, removed_indices, spectral_l1,
    spectral_l1_with, FilterMask, Transform,
};
use fmerge_core::{FilterSpec, Tensor};
use proptest::prelude::*;

fn high(rho: f64) -> FilterSpec {
    FilterSpec::high_pass(rho).unwrap()
}

fn low(rho: f64) -> FilterSpec {
    FilterSpec::low_pass(rho).unwrap()
}

fn signal_shapes() -> Vec<Vec<usize>> {
    let mut shapes: Vec<Vec<usize>> = (2..=64).map(|n| vec![n]).collect();
    for a in 2..=16 {
        for b in 2..=16 {
            shapes.push(vec![a, b]);
        }
    }
    shapes
}

#[test]
fn fft_matches_direct_dft_on_every_small_shape() {
    let mut r = rng(11);
    for shape in signal_shapes() {
        let t = random_tensor(&mut r, &shape);
        let fast = fft(&t).unwrap();
        let slow = dft_oracle(&t).unwrap();
        assert_eq!(fast.shape, slow.shape);
        let err = fast
            .coefficients
            .iter()
            .zip(&slow.coefficients)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err <= 1e-4, "shape {shape:?}: {err}");
    }
}

#[test]
fn fft_filter_matches_oracle_filter_on_every_small_shape() {
    let mut r = rng(12);
    for (k, shape) in signal_shapes().into_iter().enumerate() {
        let t = random_tensor(&mut r, &shape);
        let spec = match k % 3 {
            0 => high(0.3),
            1 => low(0.2),
            _ => FilterSpec::band_stop_centered(0.4).unwrap(),
        };
        let fast = filter_tensor_with(&t, &spec, Transform::Fft).unwrap();
        let slow = filter_tensor_with(&t, &spec, Transform::Oracle).unwrap();
        let err = max_abs_diff(fast.data(), slow.data());
        assert!(err <= 1e-4, "shape {shape:?}: {err}");
    }
}

#[test]
fn four_by_four_removes_dc_and_first_ranked_neighbour() {
    // Radii: (0,1) and (1,0) tie at 0.5; the lower flat index wins.
    assert_eq!(removed_indices(&[4, 4], 0.1), vec![0, 1]);
    let mask = FilterMask::new(&[4, 4], &high(0.1)).unwrap();
    assert!(!mask.keeps(0));
    assert!(!mask.keeps(1));
    // Conjugate partner of (0,1) is (0,3).
    assert!(!mask.keeps(3));
    assert!(mask.keeps(4));
}

#[test]
fn spectral_l1_matches_oracle_computation() {
    let mut r = rng(13);
    for shape in [vec![5, 7], vec![16, 3], vec![33]] {
        let a = random_tensor(&mut r, &shape);
        let b = random_tensor(&mut r, &shape);
        let fast = spectral_l1(&a, &b).unwrap();
        let slow = spectral_l1_with(&a, &b, Transform::Oracle).unwrap();
        assert!((fast - slow).abs() <= 1e-4 * slow, "{fast} vs {slow}");
        let fa = dft_oracle(&a).unwrap();
        let fb = dft_oracle(&b).unwrap();
        let by_hand: f64 = fa
            .coefficients
            .iter()
            .zip(&fb.coefficients)
            .map(|(x, y)| (x - y).norm())
            .sum();
        assert!((slow - by_hand).abs() <= 1e-9 * by_hand);
    }
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().map(|&x| f64::from(x)).sum::<f64>() / t.numel() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn inverse_undoes_forward(t in tensor()) {
        let back = ifft(&fft(&t).unwrap()).unwrap();
        for (z, &x) in back.iter().zip(t.data()) {
            prop_assert!((z.re - f64::from(x)).abs() <= 1e-6);
            prop_assert!(z.im.abs() <= 1e-6);
        }
    }

    #[test]
    fn filtering_is_idempotent(t in tensor(), rho in 0.0f64..=1.0, mode in 0usize..3) {
        let spec = match mode {
            0 => high(rho),
            1 => low(rho),
            _ => FilterSpec::band_stop_centered(rho).unwrap(),
        };
        let once = filter_tensor(&t, &spec).unwrap();
        let twice = filter_tensor(&once, &spec).unwrap();
        prop_assert!(max_abs_diff(once.data(), twice.data()) <= 1e-5);
    }

    #[test]
    fn filtering_is_linear(
        (a, b) in common::signal_shape().prop_flat_map(|s| (common::tensor_of(s.clone()), common::tensor_of(s))),
        alpha in -2.0f32..2.0,
        beta in -2.0f32..2.0,
        rho in 0.0f64..=1.0,
    ) {
        let spec = high(rho);
        let combo: Vec<f32> = a.data().iter().zip(b.data()).map(|(&x, &y)| alpha * x + beta * y).collect();
        let lhs = filter_tensor(&a.with_data(combo), &spec).unwrap();
        let fa = filter_tensor(&a, &spec).unwrap();
        let fb = filter_tensor(&b, &spec).unwrap();
        let rhs: Vec<f32> = fa.data().iter().zip(fb.data()).map(|(&x, &y)| alpha * x + beta * y).collect();
        let scale = rhs.iter().fold(1.0f64, |m, &x| m.max(f64::from(x).abs()));
        prop_assert!(max_abs_diff(lhs.data(), &rhs) <= 1e-5 * scale);
    }

    #[test]
    fn high_and_low_pass_partition_energy(t in tensor(), rho in 0.0f64..=1.0) {
        let hp = filter_tensor(&t, &high(rho)).unwrap();
        let lp = filter_tensor(&t, &low(rho)).unwrap();
        let total = sq_norm(t.data());
        let parts = sq_norm(hp.data()) + sq_norm(lp.data());
        prop_assert!((total - parts).abs() <= 1e-4 * total.max(1e-12));
        // The two outputs also sum back to the input.
        let sum: Vec<f32> = hp.data().iter().zip(lp.data()).map(|(x, y)| x + y).collect();
        prop_assert!(max_abs_diff(&sum, t.data()) <= 1e-5);
    }

    #[test]
    fn high_pass_output_has_zero_mean(t in tensor(), rho in 0.001f64..=1.0) {
        let spec = high(rho);
        let mask = FilterMask::new(t.shape(), &spec).unwrap();
        prop_assume!(mask.zeroed_count() > 0);
        let out = filter_tensor(&t, &spec).unwrap();
        prop_assert!(mean(&out).abs() <= 1e-6);
    }

    #[test]
    fn high_and_low_keep_complementary_sets(shape in common::signal_shape(), rho in 0.0f64..=1.0) {
        let h = FilterMask::new(&shape, &high(rho)).unwrap();
        let l = FilterMask::new(&shape, &low(rho)).unwrap();
        let m: usize = shape.iter().product();
        for i in 0..m {
            prop_assert_ne!(h.keeps(i), l.keeps(i));
        }
    }
}
