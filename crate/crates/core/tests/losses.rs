mod common;

use common::{random_image, rng};
use gesturegen::image::Image;
use gesturegen::kernels::Window;
use gesturegen::stage1_losses::{
    lsgan_losses, stage1_total, LossWeights, PerceptualExtractor, RegionAnnotation, Stage1Parts,
};
use gesturegen::Error;
use proptest::prelude::*;

fn regions() -> RegionAnnotation {
    RegionAnnotation {
        hand: Window {
            x0: 2,
            y0: 20,
            x1: 10,
            y1: 30,
        },
        face: Window {
            x0: 12,
            y0: 2,
            x1: 22,
            y1: 12,
        },
    }
}

/// Adds `delta` to every channel of the pixels `inside` selects.
fn perturb(img: &Image, delta: f64, inside: impl Fn(usize, usize) -> bool) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..img.height() {
            for x in 0..img.width() {
                if inside(y, x) {
                    let v = (img.get(c, y, x) + delta).clamp(0.0, 1.0);
                    out.set(c, y, x, v);
                }
            }
        }
    }
    out
}

fn within(w: Window, y: usize, x: usize) -> bool {
    (w.y0..w.y1).contains(&y) && (w.x0..w.x1).contains(&x)
}

#[test]
fn identical_images_give_zero_everywhere() {
    let ext = PerceptualExtractor::default();
    let a = random_image(32, 32, &mut rng(0));
    assert_eq!(ext.perceptual_global(&a, &a, &[32, 16]).unwrap(), 0.0);
    let local = ext.perceptual_local(&a, &a, &regions(), 16).unwrap();
    assert_eq!((local.hand, local.face), (0.0, 0.0));
}

#[test]
fn constant_offset_is_detected() {
    let ext = PerceptualExtractor::default();
    let a = random_image(32, 32, &mut rng(1));
    let b = perturb(&a, 0.1, |_, _| true);
    assert!(ext.perceptual_global(&a, &b, &[32, 16]).unwrap() > 0.0);
}

#[test]
fn pyramid_levels_are_finite_and_positive() {
    let ext = PerceptualExtractor::default();
    let mut r = rng(2);
    for _ in 0..100 {
        let (a, b) = (random_image(32, 32, &mut r), random_image(32, 32, &mut r));
        let full = ext.perceptual_levels(&a, &b, &[32]).unwrap()[0];
        let both = ext.perceptual_levels(&a, &b, &[32, 16]).unwrap();
        assert!(full.is_finite() && full > 0.0);
        assert_eq!(both[0], full);
        assert!(both[1].is_finite() && both[1] > 0.0 && both[1] != full);
    }
}

#[test]
fn hand_corruption_only_moves_the_hand_term() {
    let ext = PerceptualExtractor::default();
    let a = random_image(32, 32, &mut rng(3));
    let reg = regions();
    let b = perturb(&a, 0.3, |y, x| within(reg.hand, y, x));
    let l = ext.perceptual_local(&a, &b, &reg, 16).unwrap();
    assert!(l.hand > 0.0);
    assert_eq!(l.face, 0.0);
}

#[test]
fn background_corruption_only_moves_the_global_term() {
    let ext = PerceptualExtractor::default();
    let a = random_image(32, 32, &mut rng(4));
    let reg = regions();
    let b = perturb(&a, -0.3, |y, x| {
        !within(reg.hand, y, x) && !within(reg.face, y, x)
    });
    assert_eq!(ext.perceptual_local(&a, &b, &reg, 16).unwrap().total(), 0.0);
    assert!(ext.perceptual_global(&a, &b, &[32, 16]).unwrap() > 0.0);
}

#[test]
fn empty_region_is_a_contract_error() {
    let ext = PerceptualExtractor::default();
    let a = random_image(32, 32, &mut rng(5));
    let mut reg = regions();
    reg.face.x1 = reg.face.x0;
    assert!(matches!(
        ext.perceptual_local(&a, &a, &reg, 16),
        Err(Error::Contract(_))
    ));
}

#[test]
fn least_squares_reference_values() {
    let (d, _) = lsgan_losses(&[1.0; 9], &[0.0; 9]).unwrap();
    assert_eq!(d, 0.0);
    let (d, g) = lsgan_losses(&[0.5; 9], &[0.5; 9]).unwrap();
    assert_eq!((d, g), (0.5, 0.25));
}

#[test]
fn total_reference_values() {
    let parts = |a, b, c| Stage1Parts {
        per_glo: a,
        per_loc: 0.0,
        gan: b,
        discr: c,
    };
    let w = |a, b, c| LossWeights::new(a, b, c).unwrap();
    assert_eq!(
        stage1_total(&parts(2.0, 17.0, -3.0), &w(1.0, 0.0, 0.0)).unwrap(),
        2.0
    );
    assert_eq!(
        stage1_total(&parts(1.0, 2.0, 3.0), &w(1.0, 1.0, 1.0)).unwrap(),
        6.0
    );
    assert_eq!(
        stage1_total(&parts(1.0, 2.0, 3.0), &w(0.0, 0.0, 0.0)).unwrap(),
        0.0
    );
    assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]

    #[test]
    fn local_terms_only_see_their_own_box(seed in any::<u64>(), delta in 0.05f64..0.5) {
        let ext = PerceptualExtractor::default();
        let a = random_image(32, 32, &mut rng(seed));
        let reg = regions();
        let face = perturb(&a, delta, |y, x| within(reg.face, y, x));
        let l = ext.perceptual_local(&a, &face, &reg, 16).unwrap();
        prop_assert_eq!(l.hand, 0.0);
        prop_assert!(l.face > 0.0);
    }

    #[test]
    fn total_is_linear_in_each_part(
        p in prop::array::uniform4(0.0f64..10.0),
        w in prop::array::uniform3(0.0f64..10.0),
        bump in 0.5f64..4.0,
    ) {
        let weights = LossWeights::new(w[0], w[1], w[2]).unwrap();
        let base = Stage1Parts { per_glo: p[0], per_loc: p[1], gan: p[2], discr: p[3] };
        let t0 = stage1_total(&base, &weights).unwrap();
        let probes = [
            (Stage1Parts { per_glo: p[0] + bump, ..base }, w[0]),
            (Stage1Parts { per_loc: p[1] + bump, ..base }, w[0]),
            (Stage1Parts { gan: p[2] + bump, ..base }, w[1]),
            (Stage1Parts { discr: p[3] + bump, ..base }, w[2]),
        ];
        for (parts, coef) in probes {
            let t = stage1_total(&parts, &weights).unwrap();
            prop_assert!(((t - t0) - coef * bump).abs() < 1e-9 * (1.0 + t0.abs()));
        }
    }

    #[test]
    fn perceptual_terms_are_nonnegative(seed in any::<u64>()) {
        let ext = PerceptualExtractor::default();
        let mut r = rng(seed);
        let (a, b) = (random_image(32, 32, &mut r), random_image(32, 32, &mut r));
        prop_assert!(ext.perceptual_global(&a, &b, &[32, 16]).unwrap() >= 0.0);
        let l = ext.perceptual_local(&a, &b, &regions(), 16).unwrap();
        prop_assert!(l.hand >= 0.0 && l.face >= 0.0);
    }
}
