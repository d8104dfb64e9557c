//! Stage-1 objective: multi-resolution perceptual loss (global and hand/face
//! crops), a least-squares patch discriminator, and the weighted total.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::Window;
use crate::nn::{he_std, Bound, Conv, ParamStore};
use crate::tensor::Tensor;

const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

/// Frozen convolutional feature network for perceptual losses. Taps are the
/// raw pixels and the activations after each convolution.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    store: ParamStore,
    convs: Vec<Conv>,
    slope: f64,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

impl PerceptualExtractor {
    /// Random-feature extractor with weights pinned by `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let slope = 0.2;
        let convs = vec![
            Conv::new(
                &mut store,
                "per.conv0",
                3,
                8,
                (3, 3),
                1,
                he_std(27, slope),
                &mut rng,
            ),
            Conv::new(
                &mut store,
                "per.conv1",
                8,
                16,
                (3, 3),
                2,
                he_std(72, slope),
                &mut rng,
            ),
        ];
        PerceptualExtractor {
            store,
            convs,
            slope,
        }
    }

    /// Replaces the random weights with externally trained ones stored under
    /// `per.conv{0,1}.{w,b}`.
    pub fn load_weights(&mut self, c: &Container) -> Result<()> {
        self.store.load_from("", |name| c.get(name).cloned())
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Tap activations for `[n, 3, h, w]` images.
    pub fn taps(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let p = self.store.bind(g, false);
        let mut taps = vec![x];
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, &p, h);
            h = g.leaky(h, self.slope);
            taps.push(h);
        }
        taps
    }

    /// Sum over taps of the mean absolute difference at the inputs' size.
    pub fn distance_graph(&self, g: &mut Graph, real: Var, fake: Var) -> Var {
        let tr = self.taps(g, real);
        let tf = self.taps(g, fake);
        let terms: Vec<Var> = tr.iter().zip(&tf).map(|(&a, &b)| g.l1(a, b)).collect();
        sum_all(g, &terms)
    }

    /// Per-level distances over the resolution pyramid `levels`.
    pub fn pyramid_graph(&self, g: &mut Graph, real: Var, fake: Var, levels: &[usize]) -> Vec<Var> {
        let s = g.shape(real).to_vec();
        levels
            .iter()
            .map(|&side| {
                let (r, f) = if side == s[2] && side == s[3] {
                    (real, fake)
                } else {
                    (g.resize(real, side, side), g.resize(fake, side, side))
                };
                self.distance_graph(g, r, f)
            })
            .collect()
    }

    /// Summed pyramid loss as a tape node.
    pub fn global_graph(&self, g: &mut Graph, real: Var, fake: Var, levels: &[usize]) -> Var {
        let terms = self.pyramid_graph(g, real, fake, levels);
        sum_all(g, &terms)
    }

    /// Hand and face losses on crops resized to `size × size`.
    pub fn local_graph(
        &self,
        g: &mut Graph,
        real: Var,
        fake: Var,
        regions: &[RegionAnnotation],
        size: usize,
    ) -> (Var, Var) {
        let hands: Vec<Window> = regions.iter().map(|r| r.hand).collect();
        let faces: Vec<Window> = regions.iter().map(|r| r.face).collect();
        let mut part = |wins: &[Window]| {
            let r = g.crop_resize(real, wins, size, size);
            let f = g.crop_resize(fake, wins, size, size);
            self.distance_graph(g, r, f)
        };
        let hand = part(&hands);
        let face = part(&faces);
        (hand, face)
    }

    pub fn perceptual_global(&self, real: &Image, fake: &Image, levels: &[usize]) -> Result<f64> {
        Ok(self.perceptual_levels(real, fake, levels)?.iter().sum())
    }

    /// One value per pyramid level.
    pub fn perceptual_levels(
        &self,
        real: &Image,
        fake: &Image,
        levels: &[usize],
    ) -> Result<Vec<f64>> {
        same_shape(real, fake)?;
        if levels.is_empty() || levels.contains(&0) {
            return Err(Error::Contract(
                "pyramid levels must be nonempty and positive".into(),
            ));
        }
        let mut g = Graph::new();
        let (r, f) = pair(&mut g, real, fake);
        let terms = self.pyramid_graph(&mut g, r, f, levels);
        Ok(terms.iter().map(|&t| g.value(t).data()[0]).collect())
    }

    pub fn perceptual_local(
        &self,
        real: &Image,
        fake: &Image,
        regions: &RegionAnnotation,
        size: usize,
    ) -> Result<LocalLoss> {
        same_shape(real, fake)?;
        regions.validate(real.height(), real.width())?;
        if size == 0 {
            return Err(Error::Contract("local crop size must be positive".into()));
        }
        let mut g = Graph::new();
        let (r, f) = pair(&mut g, real, fake);
        let (hand, face) = self.local_graph(&mut g, r, f, std::slice::from_ref(regions), size);
        Ok(LocalLoss {
            hand: g.value(hand).data()[0],
            face: g.value(face).data()[0],
        })
    }
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

fn pair(g: &mut Graph, real: &Image, fake: &Image) -> (Var, Var) {
    let batch = |img: &Image| {
        let s = img.tensor().shape().to_vec();
        img.tensor()
            .clone()
            .reshape(&[1, s[0], s[1], s[2]])
            .expect("batch of one")
    };
    (g.constant(batch(real)), g.constant(batch(fake)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalLoss {
    pub hand: f64,
    pub face: f64,
}

impl LocalLoss {
    pub fn total(&self) -> f64 {
        self.hand + self.face
    }
}

/// Hand and face boxes in pixel coordinates (end-exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionAnnotation {
    pub hand: Window,
    pub face: Window,
}

impl RegionAnnotation {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        for (name, b) in [("hand", self.hand), ("face", self.face)] {
            if b.x0 >= b.x1 || b.y0 >= b.y1 {
                return Err(Error::Contract(format!("{name} box {b:?} is empty")));
            }
            if b.x1 > w || b.y1 > h {
                return Err(Error::Contract(format!(
                    "{name} box {b:?} exceeds {w}x{h} image"
                )));
            }
        }
        Ok(())
    }

    /// Lower half of the face box.
    pub fn lip(&self) -> Window {
        let f = self.face;
        Window {
            y0: f.y0 + f.height() / 2,
            ..f
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_per: f64,
    pub lambda_gan: f64,
    pub lambda_discr: f64,
}

impl LossWeights {
    pub fn new(lambda_per: f64, lambda_gan: f64, lambda_discr: f64) -> Result<Self> {
        let w = [lambda_per, lambda_gan, lambda_discr];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Contract(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        Ok(LossWeights {
            lambda_per,
            lambda_gan,
            lambda_discr,
        })
    }
}

/// Individual stage-1 loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Parts {
    pub per_glo: f64,
    pub per_loc: f64,
    pub gan: f64,
    pub discr: f64,
}

impl Stage1Parts {
    pub fn per(&self) -> f64 {
        self.per_glo + self.per_loc
    }
}

/// `λ_per·(L_glo + L_loc) + λ_GAN·L_GAN + λ_discr·L_discr`.
pub fn stage1_total(parts: &Stage1Parts, w: &LossWeights) -> Result<f64> {
    let all = [parts.per_glo, parts.per_loc, parts.gan, parts.discr];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss part in {all:?}")));
    }
    Ok(w.lambda_per * parts.per() + w.lambda_gan * parts.gan + w.lambda_discr * parts.discr)
}

/// Least-squares objectives from patch scores:
/// `d = mean((D(real) − 1)² + D(fake)²)`, `g = mean((D(fake) − 1)²)`.
pub fn lsgan_losses(real_scores: &[f64], fake_scores: &[f64]) -> Result<(f64, f64)> {
    if real_scores.len() != fake_scores.len() || real_scores.is_empty() {
        return Err(Error::Shape(
            "score grids must be nonempty and equal in size".into(),
        ));
    }
    let n = real_scores.len() as f64;
    let d = real_scores
        .iter()
        .zip(fake_scores)
        .map(|(r, f)| (r - 1.0).powi(2) + f * f)
        .sum::<f64>()
        / n;
    let g = fake_scores.iter().map(|f| (f - 1.0).powi(2)).sum::<f64>() / n;
    Ok((d, g))
}

/// Convolutional discriminator producing a grid of per-patch scores.
#[derive(Clone, Debug)]
pub struct Discriminator {
    store: ParamStore,
    convs: [Conv; 3],
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = 0.2;
        let convs = [
            Conv::new(
                &mut store,
                "disc.conv0",
                3,
                16,
                (3, 3),
                2,
                he_std(27, s),
                &mut rng,
            ),
            Conv::new(
                &mut store,
                "disc.conv1",
                16,
                32,
                (3, 3),
                2,
                he_std(144, s),
                &mut rng,
            ),
            Conv::new(
                &mut store,
                "disc.out",
                32,
                1,
                (3, 3),
                1,
                he_std(288, 1.0),
                &mut rng,
            ),
        ];
        Discriminator { store, convs }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[n, 3, H, W] -> [n, 1, H/4, W/4]`.
    pub fn scores_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, p, h);
            if i + 1 < self.convs.len() {
                h = g.leaky(h, 0.2);
            }
        }
        h
    }

    /// Discriminator objective on tape.
    pub fn d_loss_graph(&self, g: &mut Graph, p: &Bound, real: Var, fake: Var) -> Var {
        let sr = self.scores_graph(g, p, real);
        let sf = self.scores_graph(g, p, fake);
        let r1 = g.add_scalar(sr, -1.0);
        let r1 = g.square(r1);
        let f2 = g.square(sf);
        let both = g.add(r1, f2);
        g.mean(both)
    }

    /// Generator adversarial objective on tape.
    pub fn g_loss_graph(&self, g: &mut Graph, p: &Bound, fake: Var) -> Var {
        let sf = self.scores_graph(g, p, fake);
        let f1 = g.add_scalar(sf, -1.0);
        let f1 = g.square(f1);
        g.mean(f1)
    }

    pub fn scores(&self, img: &Image) -> Vec<f64> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let (x, _) = pair(&mut g, img, img);
        let s = self.scores_graph(&mut g, &p, x);
        g.value(s).data().to_vec()
    }

    /// `(d_loss, g_loss)` for one real/fake pair.
    pub fn discriminator_losses(&self, real: &Image, fake: &Image) -> Result<(f64, f64)> {
        same_shape(real, fake)?;
        lsgan_losses(&self.scores(real), &self.scores(fake))
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        for (name, t) in self.store.iter() {
            c.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn load_from(&mut self, c: &Container, prefix: &str) -> Result<()> {
        self.store.load_from(prefix, |name| c.get(name).cloned())
    }
}

/// Stacks per-item tensors `[3, h, w]` for tape use.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let ts: Vec<Tensor> = images.iter().map(|i| i.tensor().clone()).collect();
    Tensor::stack(&ts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_clamped(Tensor::randn(&[3, 32, 32], 0.2, &mut rng).map(|v| v + 0.5)).unwrap()
    }

    #[test]
    fn lsgan_arithmetic() {
        assert_eq!(lsgan_losses(&[1.0; 4], &[0.0; 4]).unwrap().0, 0.0);
        let (d, g) = lsgan_losses(&[0.5; 4], &[0.5; 4]).unwrap();
        assert_eq!((d, g), (0.5, 0.25));
    }

    #[test]
    fn total_is_weighted_sum() {
        let parts = Stage1Parts {
            per_glo: 0.5,
            per_loc: 0.5,
            gan: 2.0,
            discr: 3.0,
        };
        assert_eq!(
            stage1_total(&parts, &LossWeights::new(1.0, 1.0, 1.0).unwrap()).unwrap(),
            6.0
        );
        assert_eq!(
            stage1_total(&parts, &LossWeights::new(0.0, 0.0, 0.0).unwrap()).unwrap(),
            0.0
        );
        let p2 = Stage1Parts {
            per_glo: 2.0,
            per_loc: 0.0,
            gan: 7.0,
            discr: 9.0,
        };
        assert_eq!(
            stage1_total(&p2, &LossWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap(),
            2.0
        );
    }

    #[test]
    fn perceptual_identity_and_sensitivity() {
        let ex = PerceptualExtractor::default();
        let a = img(1);
        assert_eq!(ex.perceptual_global(&a, &a, &[32, 16]).unwrap(), 0.0);
        let b = Image::from_clamped(a.tensor().map(|v| v * 0.8 + 0.1)).unwrap();
        assert!(ex.perceptual_global(&a, &b, &[32, 16]).unwrap() > 0.0);
    }

    #[test]
    fn empty_box_is_a_contract_error() {
        let ex = PerceptualExtractor::default();
        let a = img(2);
        let regions = RegionAnnotation {
            hand: Window {
                x0: 3,
                y0: 3,
                x1: 3,
                y1: 9,
            },
            face: Window {
                x0: 0,
                y0: 0,
                x1: 8,
                y1: 8,
            },
        };
        assert!(matches!(
            ex.perceptual_local(&a, &a, &regions, 8),
            Err(Error::Contract(_))
        ));
    }
}
