mod common;

use common::{frechet_oracle, random_image, rng};
use gesturegen::config::EvalConfig;
use gesturegen::image::Image;
use gesturegen::kernels::Window;
use gesturegen::metrics::{
    beat_alignment, diversity, frechet_distance, gesture_beats_from_motion, psnr, ssim,
    BeatSequence, EmbeddingSet, PSNR_CAP,
};
use gesturegen::synthetic_data::{generate_clip, generate_with_truth, SceneSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn set(v: Vec<Vec<f64>>) -> EmbeddingSet {
    EmbeddingSet::new(v, "test").unwrap()
}

fn gaussian(n: usize, mix: &DMatrix<f64>, shift: f64, r: &mut impl Rng) -> Vec<Vec<f64>> {
    let d = mix.nrows();
    (0..n)
        .map(|_| {
            let z = DMatrix::from_fn(d, 1, |_, _| r.sample::<f64, _>(StandardNormal));
            (mix * z).iter().map(|v| v + shift).collect()
        })
        .collect()
}

#[test]
fn frechet_of_a_set_with_itself_is_zero() {
    let mut r = rng(0);
    let mix = DMatrix::from_fn(5, 5, |_, _| r.random_range(-1.0..1.0));
    let a = set(gaussian(300, &mix, 0.0, &mut r));
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
}

#[test]
fn frechet_one_dimensional_closed_form() {
    let h = 0.5f64.sqrt();
    // Sample mean 0 and 1, unbiased variance 1 for both.
    let a = set(vec![vec![-h], vec![h]]);
    let b = set(vec![vec![1.0 - h], vec![1.0 + h]]);
    assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn frechet_matches_dense_oracle_in_five_dimensions() {
    let mut r = rng(1);
    for trial in 0..5 {
        let ma = DMatrix::from_fn(5, 5, |_, _| r.random_range(-1.0..1.0));
        let mb = DMatrix::from_fn(5, 5, |_, _| r.random_range(-1.0..1.0));
        let a = gaussian(200, &ma, 0.0, &mut r);
        let b = gaussian(150, &mb, 0.3, &mut r);
        let got = frechet_distance(&set(a.clone()), &set(b.clone())).unwrap();
        let want = frechet_oracle(&a, &b);
        assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn frechet_needs_two_samples_and_equal_dims() {
    let one = set(vec![vec![0.0, 1.0]]);
    let two = set(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    let other = set(vec![vec![0.0], vec![1.0]]);
    assert!(frechet_distance(&one, &two).is_err());
    assert!(frechet_distance(&two, &other).is_err());
}

#[test]
fn diversity_reference_values() {
    let s = |m: f64| set(vec![vec![m - 1.0], vec![m + 1.0]]);
    assert_eq!(diversity(&[s(0.0), s(0.0), s(0.0)]).unwrap(), 0.0);
    assert_eq!(diversity(&[s(0.0), s(3.0)]).unwrap(), 3.0);
    assert!((diversity(&[s(0.0), s(1.0), s(2.0)]).unwrap() - 4.0 / 3.0).abs() < 1e-12);
    assert!(diversity(&[s(0.0)]).is_err());
}

#[test]
fn bas_reference_values() {
    let beats = BeatSequence::new(vec![0.4, 1.1, 2.0, 2.7]).unwrap();
    assert_eq!(beat_alignment(&beats, &beats, 0.1).unwrap(), 1.0);
    let sigma = 0.1;
    let speech = BeatSequence::new(vec![1.0]).unwrap();
    let gesture = BeatSequence::new(vec![0.2, 1.0 + sigma, 3.0]).unwrap();
    let got = beat_alignment(&speech, &gesture, sigma).unwrap();
    assert!((got - (-0.5f64).exp()).abs() < 1e-9);
}

/// Gesture beats read from the ground-truth arm angles of generated clips.
#[test]
fn ground_truth_clips_have_perfect_bas() {
    let spec = SceneSpec::default();
    let eval = EvalConfig::default();
    for seed in 0..10 {
        let (clip, poses) = generate_with_truth(&spec, 4.0, seed).unwrap();
        let motion: Vec<Vec<f64>> = poses
            .iter()
            .map(|p| vec![p.right_shoulder, p.right_elbow])
            .collect();
        let g = gesture_beats_from_motion(&motion, clip.fps, eval.beat_prominence).unwrap();
        let frames: Vec<usize> = g
            .times()
            .iter()
            .map(|t| (t * clip.fps).round() as usize)
            .collect();
        assert_eq!(frames, clip.beat_frames(), "seed {seed}");
        let speech = BeatSequence::new(clip.beat_times.clone()).unwrap();
        assert_eq!(beat_alignment(&speech, &g, eval.bas_sigma).unwrap(), 1.0);
    }
}

#[test]
fn constant_motion_has_no_beats() {
    let frames = vec![vec![0.3, -1.0]; 20];
    assert!(gesture_beats_from_motion(&frames, 10.0, 0.3)
        .unwrap()
        .is_empty());
    assert!(gesture_beats_from_motion(&frames[..2], 10.0, 0.3).is_err());
}

/// A 1-D trajectory whose speed follows `1 + sin` with a 10-frame period
/// has one speed peak per second at 10 fps.
#[test]
fn periodic_speed_gives_one_beat_per_period() {
    let fps = 10.0;
    let mut x = 0.0;
    let frames: Vec<Vec<f64>> = (0..60)
        .map(|i| {
            x += 1.0 + (std::f64::consts::TAU * i as f64 / 10.0).sin();
            vec![x]
        })
        .collect();
    let beats = gesture_beats_from_motion(&frames, fps, 0.3).unwrap();
    assert!(beats.len() >= 4);
    for w in beats.times().windows(2) {
        assert!(
            (w[1] - w[0] - 1.0).abs() <= 1.0 / fps + 1e-9,
            "spacing {}",
            w[1] - w[0]
        );
    }
}

#[test]
fn identical_images_cap_psnr_and_give_unit_ssim() {
    let a = random_image(24, 24, &mut rng(2));
    assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
    assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
    let win = Window {
        x0: 3,
        y0: 4,
        x1: 15,
        y1: 20,
    };
    assert_eq!(psnr(&a, &a, Some(win)).unwrap(), PSNR_CAP);
}

#[test]
fn uniform_offset_gives_twenty_db() {
    let a = Image::filled(16, 16, [0.2, 0.5, 0.7]);
    let b = Image::filled(16, 16, [0.3, 0.6, 0.8]);
    assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
    assert!(ssim(&a, &b, None).unwrap() < 1.0);
}

#[test]
fn region_outside_the_image_is_rejected() {
    let a = Image::filled(8, 8, [0.5; 3]);
    let win = Window {
        x0: 0,
        y0: 0,
        x1: 9,
        y1: 4,
    };
    assert!(psnr(&a, &a, Some(win)).is_err());
}

#[test]
fn generated_clips_are_finite_images() {
    let clip = generate_clip(&SceneSpec::default(), 1.0, 3).unwrap();
    for f in &clip.frames {
        assert!(f.tensor().all_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let mut r = rng(seed);
        let ma = DMatrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0));
        let mb = DMatrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0));
        let a = set(gaussian(40, &ma, 0.0, &mut r));
        let b = set(gaussian(30, &mb, shift, &mut r));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
    }

    #[test]
    fn bas_falls_as_gestures_drift(
        gaps in prop::collection::vec(0.2f64..1.0, 1..8),
        step in 0.005f64..0.1,
    ) {
        let mut t = 0.0;
        let speech: Vec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
        // Past half the smallest gap the nearest neighbour changes.
        let limit = gaps.iter().skip(1).fold(f64::INFINITY, |m, &g| m.min(g)) / 2.0;
        let speech = BeatSequence::new(speech).unwrap();
        let mut last = beat_alignment(&speech, &speech, 0.1).unwrap();
        prop_assert_eq!(last, 1.0);
        for i in (1..20).take_while(|&i| step * (i as f64) < limit) {
            let b = beat_alignment(&speech, &speech.shifted(step * i as f64), 0.1).unwrap();
            prop_assert!(b > 0.0 && b <= last);
            last = b;
        }
    }

    #[test]
    fn ssim_is_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_image(16, 16, &mut r), random_image(16, 16, &mut r));
        let s = ssim(&a, &b, None).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(s < 1.0);
    }
}
