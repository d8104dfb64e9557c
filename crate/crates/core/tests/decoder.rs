mod common;

use common::{random_tensor, rng, tiny_model};
use gesturegen::deviation_decoder::{
    activate, deviation_with, interpolate, warp, ActivationParams, DeviationMap, FeatureMap,
    Generator,
};
use gesturegen::motion_latent::FlowField;
use gesturegen::tensor::Tensor;
use gesturegen::Error;
use proptest::prelude::*;
use rand::Rng;

fn fmap(c: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMap {
    FeatureMap::new(Tensor::from_vec(&[c, h, w], data).unwrap()).unwrap()
}

fn uniform_flow(h: usize, w: usize, dx: f64, dy: f64) -> FlowField {
    let mut d = vec![dx; h * w];
    d.extend(vec![dy; h * w]);
    FlowField::new(Tensor::from_vec(&[2, h, w], d).unwrap()).unwrap()
}

#[test]
fn gate_on_ten_thousand_inputs() {
    let mut r = rng(1);
    let n = 10_000;
    let x = fmap(
        1,
        1,
        n,
        (0..n).map(|_| r.random_range(-30.0..30.0)).collect(),
    );
    for (w, b, cap) in [(1.0, 0.0, 1.0), (0.7, -0.4, 2.5), (3.0, 1.0, 0.5)] {
        let d = deviation_with(&x, &[w], &[b], cap);
        assert!(d.data().iter().all(|&v| v > 0.0 && v < cap));
        let xs = x.tensor().data();
        for i in 0..n - 1 {
            let (a, bb) = (i, i + 1);
            if xs[a] < xs[bb] {
                assert!(
                    d.data()[a] <= d.data()[bb],
                    "not monotone at {} < {}",
                    xs[a],
                    xs[bb]
                );
            }
        }
    }
}

#[test]
fn gate_reference_values() {
    let x = fmap(1, 1, 3, vec![-4.0, 0.25, 9.0]);
    let d = deviation_with(&x, &[0.0], &[0.0], 1.0);
    assert!(d.data().iter().all(|&v| v == 0.5));
    let sat = deviation_with(&fmap(1, 1, 1, vec![20.0]), &[1.0], &[0.0], 1.0);
    assert!((sat.data()[0] - 1.0).abs() < 1e-8);
    let zero = deviation_with(&fmap(1, 1, 1, vec![0.5]), &[2.0], &[-1.0], 1.0);
    assert_eq!(zero.data()[0], 0.5);
}

#[test]
fn activation_reference_values() {
    let x = Tensor::from_vec(&[5], vec![-5.0, -0.5, 0.0, 0.5, 3.0]).unwrap();
    let relu = activate(&x, ActivationParams::new(0.0).unwrap());
    assert_eq!(relu.data(), &[0.0, 0.0, 0.0, 0.5, 3.0]);
    assert_eq!(activate(&x, ActivationParams::new(1.0).unwrap()), x);
    assert_eq!(
        activate(&x, ActivationParams::new(0.2).unwrap()).data()[0],
        -1.0
    );
    assert!(ActivationParams::new(-0.1).is_err());
}

#[test]
fn interpolation_on_a_two_by_two_map() {
    let f = fmap(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
    let u = fmap(1, 2, 2, vec![0.5, -1.0, 2.0, 8.0]);
    let half = DeviationMap::constant(1, 2, 2, 0.5, 1.0).unwrap();
    let z = interpolate(&f, &u, &half).unwrap();
    let expected = [0.75, 0.5, 2.5, 6.0];
    for (a, b) in z.tensor().data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn decoder_mix_endpoints() {
    let cfg = tiny_model();
    let gen = Generator::new(&cfg, 3);
    let mut r = rng(3);
    let f = FeatureMap::new(random_tensor(&[cfg.channels, 4, 4], -2.0, 2.0, &mut r)).unwrap();
    let u = gen.refine(&f).unwrap();
    let eps = 1e-7;
    let close = |a: &FeatureMap, b: &FeatureMap| {
        a.tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let hi = gen
        .mix(
            &f,
            &DeviationMap::constant(cfg.channels, 4, 4, 1.0 - eps, 1.0).unwrap(),
        )
        .unwrap();
    assert!(close(&hi, &f) < 1e-6);
    let lo = gen
        .mix(
            &f,
            &DeviationMap::constant(cfg.channels, 4, 4, eps, 1.0).unwrap(),
        )
        .unwrap();
    assert!(close(&lo, &u) < 1e-6);
    let mid = gen
        .mix(
            &f,
            &DeviationMap::constant(cfg.channels, 4, 4, 0.5, 1.0).unwrap(),
        )
        .unwrap();
    let oracle: Vec<f64> = f
        .tensor()
        .data()
        .iter()
        .zip(u.tensor().data())
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    assert!(mid
        .tensor()
        .data()
        .iter()
        .zip(&oracle)
        .all(|(a, b)| (a - b).abs() < 1e-9));
}

#[test]
fn deviation_outside_the_cap_is_a_contract_error() {
    assert!(matches!(
        DeviationMap::constant(1, 2, 2, 1.0, 1.0),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        DeviationMap::constant(1, 2, 2, 0.0, 1.0),
        Err(Error::Contract(_))
    ));
    let cfg = tiny_model();
    let gen = Generator::new(&cfg, 0);
    let f = FeatureMap::new(Tensor::zeros(&[cfg.channels, 4, 4])).unwrap();
    let other_cap = DeviationMap::constant(cfg.channels, 4, 4, 0.5, 2.0).unwrap();
    assert!(matches!(
        gen.decode(&f, &other_cap),
        Err(Error::Contract(_))
    ));
}

#[test]
fn zero_flow_is_the_identity() {
    let mut r = rng(5);
    let f = FeatureMap::new(random_tensor(&[3, 6, 7], -1.0, 1.0, &mut r)).unwrap();
    let out = warp(&f, &FlowField::zeros(6, 7)).unwrap();
    assert!(out
        .tensor()
        .data()
        .iter()
        .zip(f.tensor().data())
        .all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn unit_flow_shifts_columns() {
    let mut r = rng(6);
    let f = FeatureMap::new(random_tensor(&[1, 5, 5], -1.0, 1.0, &mut r)).unwrap();
    let out = warp(&f, &uniform_flow(5, 5, 1.0, 0.0)).unwrap();
    let at = |m: &FeatureMap, y: usize, x: usize| m.tensor().data()[y * 5 + x];
    for y in 0..5 {
        for x in 0..4 {
            assert!(
                (at(&out, y, x) - at(&f, y, x + 1)).abs() < 1e-12,
                "({y}, {x})"
            );
        }
    }
}

#[test]
fn far_flow_clamps_to_the_border() {
    let mut r = rng(7);
    let f = FeatureMap::new(random_tensor(&[2, 4, 5], -1.0, 1.0, &mut r)).unwrap();
    let out = warp(&f, &uniform_flow(4, 5, 50.0, -50.0)).unwrap();
    for c in 0..2 {
        // Top-right corner of each channel.
        let corner = f.tensor().data()[c * 20 + 4];
        assert!(out.tensor().data()[c * 20..(c + 1) * 20]
            .iter()
            .all(|&v| (v - corner).abs() < 1e-12));
    }
}

#[test]
fn mismatched_flow_is_a_contract_error() {
    let f = FeatureMap::new(Tensor::zeros(&[1, 4, 4])).unwrap();
    assert!(matches!(
        warp(&f, &FlowField::zeros(3, 4)),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn gate_is_bounded_and_monotone(
        xs in prop::collection::vec(-50.0f64..50.0, 2..64),
        w in 0.01f64..5.0,
        b in -5.0f64..5.0,
        cap in 0.1f64..4.0,
    ) {
        let n = xs.len();
        let d = deviation_with(&fmap(1, 1, n, xs.clone()), &[w], &[b], cap);
        for i in 0..n {
            prop_assert!(d.data()[i] > 0.0 && d.data()[i] < cap);
            for j in 0..n {
                if xs[i] < xs[j] {
                    prop_assert!(d.data()[i] <= d.data()[j]);
                }
            }
        }
    }

    #[test]
    fn warp_is_linear_in_features(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&[2, 5, 6], -1.0, 1.0, &mut r);
        let y = random_tensor(&[2, 5, 6], -1.0, 1.0, &mut r);
        let flow = FlowField::new(random_tensor(&[2, 5, 6], -3.0, 3.0, &mut r)).unwrap();
        let combo = x.zip_map(&y, |p, q| a * p + b * q);
        let lhs = warp(&FeatureMap::new(combo).unwrap(), &flow).unwrap();
        let wx = warp(&FeatureMap::new(x).unwrap(), &flow).unwrap();
        let wy = warp(&FeatureMap::new(y).unwrap(), &flow).unwrap();
        for i in 0..lhs.tensor().len() {
            let rhs = a * wx.tensor().data()[i] + b * wy.tensor().data()[i];
            prop_assert!((lhs.tensor().data()[i] - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn activation_is_continuous_and_piecewise_linear(x in -100.0f64..100.0, c in 0.0f64..2.0) {
        let p = ActivationParams::new(c).unwrap();
        let y = activate(&Tensor::from_vec(&[1], vec![x]).unwrap(), p).data()[0];
        prop_assert_eq!(y, if x >= 0.0 { x } else { c * x });
        let near = activate(&Tensor::from_vec(&[2], vec![-1e-12, 1e-12]).unwrap(), p);
        prop_assert!((near.data()[0] - near.data()[1]).abs() < 1e-11);
    }
}
