#![allow(dead_code)]

use gesturegen::autograd::Graph;
use gesturegen::config::{DiffusionConfig, ModelConfig};
use gesturegen::deviation_decoder::Generator;
use gesturegen::image::Image;
use gesturegen::latent_diffusion::{
    Condition, Denoiser, DiffusionSchedule, MotionSequence, PRIOR_FRAMES,
};
use gesturegen::nn::ParamStore;
use gesturegen::stage1_losses::PerceptualExtractor;
use gesturegen::tensor::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A 16×16 model small enough for finite differences.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        feature_height: 4,
        feature_width: 4,
        motion_dim: 4,
        channels: 6,
        coarse_grid: 2,
        encoder_width: 4,
        pose_hidden: 8,
        ..ModelConfig::default()
    }
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..3 * h * w)
        .map(|_| rng.random_range(0.05..0.95))
        .collect();
    Image::new(Tensor::from_vec(&[3, h, w], data).unwrap()).unwrap()
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

/// Compares analytic gradients against central differences on `count`
/// randomly drawn scalars of the parameters whose names pass `select`.
/// Draws where both gradients are below `1e-7` carry no signal and are
/// redrawn. Returns the worst relative error.
pub fn check_params<T>(
    state: &mut T,
    store: impl Fn(&mut T) -> &mut ParamStore,
    select: impl Fn(&str) -> bool,
    analytic: &[Tensor],
    count: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&T) -> f64,
) -> f64 {
    let coords: Vec<(usize, usize)> = store(state)
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| select(name))
        .flat_map(|(ti, (_, t))| (0..t.len()).map(move |ei| (ti, ei)))
        .collect();
    assert!(!coords.is_empty(), "no parameters selected");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let (mut checked, mut tries) = (0, 0);
    while checked < count {
        tries += 1;
        assert!(tries < 200 * count, "too few coordinates carry gradient");
        let (ti, ei) = coords[rng.random_range(0..coords.len())];
        let orig = store(state).tensors_mut()[ti].data()[ei];
        store(state).tensors_mut()[ti].data_mut()[ei] = orig + h;
        let up = loss(state);
        store(state).tensors_mut()[ti].data_mut()[ei] = orig - h;
        let down = loss(state);
        store(state).tensors_mut()[ti].data_mut()[ei] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[ti].data()[ei];
        if a.abs() < 1e-7 && numeric.abs() < 1e-7 {
            continue;
        }
        worst = worst.max(relative_error(a, numeric));
        checked += 1;
    }
    worst
}

/// Worst relative gradient error of an image-reconstruction loss with
/// respect to `count` pose-encoder weights.
pub fn reconstruct_gradient_error(seed: u64, count: usize) -> f64 {
    let mut r = rng(seed);
    let cfg = tiny_model();
    let mut gen = Generator::new(&cfg, seed);
    // The pose head starts at zero, which would cut the encoder off from
    // the output.
    let head = gen.pose_head();
    let w = random_tensor(gen.params().get(head.w).shape(), -0.3, 0.3, &mut r);
    *gen.params_mut().get_mut(head.w) = w;
    let (s, d, t) = (
        random_image(16, 16, &mut r),
        random_image(16, 16, &mut r),
        random_image(16, 16, &mut r),
    );
    let loss_graph = |gen: &Generator, g: &mut Graph, trainable: bool| {
        let p = gen.params().bind(g, trainable);
        let src = gen.batch(g, &[&s]).unwrap();
        let drv = gen.batch(g, &[&d]).unwrap();
        let out = gen.reconstruct_graph(g, &p, src, drv);
        let target = gen.batch(g, &[&t]).unwrap();
        (g.mse(out.recon, target), p)
    };
    let mut g = Graph::new();
    let (l, p) = loss_graph(&gen, &mut g, true);
    let grads = g.backward(l);
    let analytic = p.grads(&g, &grads);
    check_params(
        &mut gen,
        |gen| gen.params_mut(),
        |name| name.starts_with("lpe."),
        &analytic,
        count,
        &mut r,
        |gen| {
            let mut g = Graph::new();
            let (l, _) = loss_graph(gen, &mut g, false);
            g.value(l).data()[0]
        },
    )
}

/// Worst relative error of the multi-resolution perceptual loss gradient
/// with respect to `count` fake-image pixels.
pub fn perceptual_gradient_error(seed: u64, count: usize) -> f64 {
    let mut r = rng(seed);
    let ext = PerceptualExtractor::default();
    let real = random_image(16, 16, &mut r)
        .into_tensor()
        .reshape(&[1, 3, 16, 16])
        .unwrap();
    let mut fake = ParamStore::new();
    fake.add("fake", random_tensor(&[1, 3, 16, 16], 0.05, 0.95, &mut r));
    let levels = [16, 8];
    let loss_graph = |fake: &ParamStore, g: &mut Graph, trainable: bool| {
        let p = fake.bind(g, trainable);
        let rv = g.constant(real.clone());
        let fv = p[fake.id_of("fake").unwrap()];
        (ext.global_graph(g, rv, fv, &levels), p)
    };
    let mut g = Graph::new();
    let (l, p) = loss_graph(&fake, &mut g, true);
    let grads = g.backward(l);
    let analytic = p.grads(&g, &grads);
    check_params(
        &mut fake,
        |f| f,
        |_| true,
        &analytic,
        count,
        &mut r,
        |fake| {
            let mut g = Graph::new();
            let (l, _) = loss_graph(fake, &mut g, false);
            g.value(l).data()[0]
        },
    )
}

pub fn tiny_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        chunk_len: 6,
        steps: 10,
        audio_dim: 3,
        hidden: 8,
        blocks: 1,
        ..DiffusionConfig::default()
    }
}

pub fn random_condition(cfg: &DiffusionConfig, k: usize, rng: &mut ChaCha8Rng) -> Condition {
    let mut v = |n: usize| {
        (0..n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    Condition {
        audio: v(cfg.chunk_len * cfg.audio_dim),
        prev4: v(PRIOR_FRAMES * k),
        source_mf: v(k),
    }
}

/// Worst relative error of the diffusion training loss gradient with respect
/// to `count` denoiser weights.
pub fn diffusion_gradient_error(seed: u64, count: usize) -> f64 {
    let mut r = rng(seed);
    let cfg = tiny_diffusion();
    let k = 3;
    let mut den = Denoiser::new(k, &cfg, seed);
    let sched = DiffusionSchedule::from_config(&cfg).unwrap();
    let x0 = MotionSequence::standard_normal(cfg.chunk_len, k, &mut r);
    let noise = MotionSequence::standard_normal(cfg.chunk_len, k, &mut r);
    let cond = random_condition(&cfg, k, &mut r);
    let t = 4;
    let loss_graph = |den: &Denoiser, g: &mut Graph, trainable: bool| {
        let p = den.params().bind(g, trainable);
        let (total, ..) = den
            .loss_graph(g, &p, &[&x0], &[&cond], &[t], &[&noise], &sched)
            .unwrap();
        (total, p)
    };
    let mut g = Graph::new();
    let (l, p) = loss_graph(&den, &mut g, true);
    let grads = g.backward(l);
    let analytic = p.grads(&g, &grads);
    check_params(
        &mut den,
        |d| d.params_mut(),
        |_| true,
        &analytic,
        count,
        &mut r,
        |den| den.diffusion_loss(&sched, &x0, &cond, t, &noise).unwrap().0,
    )
}

/// Dense-matrix reference: unbiased covariances by explicit loops and the
/// principal square root of `Σr Σf` by Denman–Beavers iteration.
pub fn frechet_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let stats = |x: &[Vec<f64>]| {
        let n = x.len() as f64;
        let mu: Vec<f64> = (0..d)
            .map(|j| x.iter().map(|v| v[j]).sum::<f64>() / n)
            .collect();
        let cov = DMatrix::from_fn(d, d, |i, j| {
            x.iter()
                .map(|v| (v[i] - mu[i]) * (v[j] - mu[j]))
                .sum::<f64>()
                / (n - 1.0)
        });
        (mu, cov)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let prod = &ca * &cb;
    let mut y = prod.clone();
    let mut z = DMatrix::<f64>::identity(d, d);
    for _ in 0..60 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        y = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
    }
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    mean + ca.trace() + cb.trace() - 2.0 * y.trace()
}
