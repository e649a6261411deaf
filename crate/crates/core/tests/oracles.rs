mod support;

use support::*;
use tcc_core::kernels::{self, ConvGeom};
use tcc_core::rng::SeededRng;
use tcc_core::Tensor;

#[test]
fn kernels_match_naive_loops() {
    for seed in [1, 2, 3] {
        for (name, err) in oracle_errors(seed) {
            assert!(err <= 1e-12, "{name}: {err:e}");
        }
    }
}

#[test]
fn conv_all_ones_example() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let y = kernels::conv2d(&x, &w, None, ConvGeom::new(1, 1, 1)).unwrap();
    assert_eq!(y.data(), conv2d_naive(&x, &w, None, 1, 1, 1).data());
    assert_eq!(y.data()[4], 9.0);
    assert_eq!(y.data()[0], 4.0);
}

#[test]
fn dilated_conv_skips_neighbours() {
    // dilation 2 on a 5x5 map reads only the even cells around the centre
    let x = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let y = kernels::conv2d(&x, &w, None, ConvGeom::same(3, 2)).unwrap();
    let centre: f64 = [0, 2, 4, 10, 12, 14, 20, 22, 24].iter().map(|&i| i as f64).sum();
    assert_eq!(y.data()[12], centre);
    assert_eq!(y.data(), conv2d_naive(&x, &w, None, 1, 2, 2).data());
}

#[test]
fn softmax_is_shift_stable_for_large_inputs() {
    let v = [1000.0, 1001.0, 999.0];
    let s = kernels::softmax(&v);
    assert!(s.iter().all(|p| p.is_finite()));
    assert!(max_abs(&s, &softmax_naive(&[0.0, 1.0, -1.0])) < 1e-15);
}

#[test]
fn decode_matches_per_position_loop_on_many_shapes() {
    let mut rng = SeededRng::new(11);
    for _ in 0..20 {
        let (n, c, h, w, k) = (rng.int_inclusive(1, 2), rng.int_inclusive(1, 12), rng.int_inclusive(1, 5), rng.int_inclusive(1, 5), rng.int_inclusive(0, 6));
        let q = random(&mut rng, &[n, c, h, w]);
        let local = random(&mut rng, &[n, c, h, w]);
        let global = random(&mut rng, &[n, k, c]);
        let proj = random(&mut rng, &[c, c, 1, 1]);
        let (o, a) = run_decode(&proj, &q, &local, &global);
        let (o2, a2) = decode_naive(&proj, &q, &local, &global);
        assert!(max_abs(o.data(), o2.data()) <= 1e-12);
        assert!(max_abs(a.data(), a2.data()) <= 1e-12);
    }
}
