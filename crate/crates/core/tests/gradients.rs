mod common;

use common::{diffusion_gradient_error, perceptual_gradient_error, reconstruct_gradient_error};

#[test]
fn reconstruction_gradient_matches_central_differences() {
    for seed in 0..2 {
        let err = reconstruct_gradient_error(seed, 10);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn perceptual_gradient_matches_central_differences() {
    for seed in 0..2 {
        let err = perceptual_gradient_error(seed, 10);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn diffusion_loss_gradient_matches_central_differences() {
    for seed in 0..2 {
        let err = diffusion_gradient_error(seed, 10);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}
