//! Evaluation metrics: Fréchet distance over embeddings, diversity, beat
//! alignment, PSNR and SSIM (optionally restricted to a region), beat
//! extraction from motion, and the fixed encoders used for FGD/FVD.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::Window;
use crate::nn::{he_std, Conv, Dense, ParamStore};
use crate::tensor::Tensor;

/// `N × D` embeddings tagged with the encoder that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    vectors: Vec<Vec<f64>>,
    source: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        let d = vectors.first().map_or(0, Vec::len);
        if vectors.is_empty() || d == 0 {
            return Err(Error::Contract("embedding set is empty".into()));
        }
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("embedding vectors differ in length".into()));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        Ok(EmbeddingSet {
            vectors,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim()];
        for v in &self.vectors {
            m.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mu = self.mean();
        let mut c = DMatrix::zeros(d, d);
        for v in &self.vectors {
            let x = DVector::from_iterator(d, v.iter().zip(&mu).map(|(a, b)| a - b));
            c += &x * x.transpose();
        }
        c / (self.len() as f64 - 1.0)
    }
}

fn clip_eigenvalues(vals: &DVector<f64>) -> Result<Vec<f64>> {
    let top = vals.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = -1e-8 * top;
    vals.iter()
        .map(|&l| {
            if l >= 0.0 {
                Ok(l)
            } else if l >= tol {
                Ok(0.0)
            } else {
                Err(Error::Numeric(format!(
                    "covariance eigenvalue {l} is negative beyond tolerance"
                )))
            }
        })
        .collect()
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = clip_eigenvalues(&eig.eigenvalues)?;
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        vals.len(),
        vals.iter().map(|v| v.sqrt()),
    ));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `‖μr − μf‖² + tr(Σr + Σf − 2(Σr Σf)^{1/2})`.
pub fn frechet_distance(real: &EmbeddingSet, fake: &EmbeddingSet) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            real.dim(),
            fake.dim()
        )));
    }
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::Contract(
            "Fréchet distance needs at least two samples per set".into(),
        ));
    }
    let (mr, mf) = (real.mean(), fake.mean());
    let mean_term: f64 = mr.iter().zip(&mf).map(|(a, b)| (a - b) * (a - b)).sum();
    let (cr, cf) = (real.covariance(), fake.covariance());
    // tr((Σr Σf)^{1/2}) = tr((Σr^{1/2} Σf Σr^{1/2})^{1/2}), a symmetric PSD form.
    let sr = psd_sqrt(&cr)?;
    let inner = &sr * &cf * &sr;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let cross: f64 = clip_eigenvalues(&eig.eigenvalues)?
        .iter()
        .map(|v| v.sqrt())
        .sum();
    Ok((mean_term + cr.trace() + cf.trace() - 2.0 * cross).max(0.0))
}

/// Mean pairwise Euclidean distance between per-input mean embeddings.
pub fn diversity(sets: &[EmbeddingSet]) -> Result<f64> {
    if sets.len() < 2 {
        return Err(Error::Contract(
            "diversity needs at least two embedding sets".into(),
        ));
    }
    let d = sets[0].dim();
    if sets.iter().any(|s| s.dim() != d) {
        return Err(Error::Shape("embedding sets differ in dimension".into()));
    }
    let means: Vec<Vec<f64>> = sets.iter().map(EmbeddingSet::mean).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            total += means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Strictly increasing beat times in seconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BeatSequence {
    times: Vec<f64>,
}

impl BeatSequence {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("non-finite beat time".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract(
                "beat times must be strictly increasing".into(),
            ));
        }
        Ok(BeatSequence { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    /// Every beat moved by `dt` seconds.
    pub fn shifted(&self, dt: f64) -> BeatSequence {
        BeatSequence {
            times: self.times.iter().map(|t| t + dt).collect(),
        }
    }
}

/// Mean over speech beats of `exp(−d² / 2σ²)`, `d` the distance to the
/// nearest gesture beat.
pub fn beat_alignment(speech: &BeatSequence, gesture: &BeatSequence, sigma: f64) -> Result<f64> {
    if speech.is_empty() || gesture.is_empty() {
        return Err(Error::Contract(
            "beat alignment needs nonempty beat sequences".into(),
        ));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Contract(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let total: f64 = speech
        .times
        .iter()
        .map(|s| {
            let d2 = gesture
                .times
                .iter()
                .map(|g| (s - g) * (s - g))
                .fold(f64::INFINITY, f64::min);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / speech.len() as f64)
}

/// Two-sided motion envelope `e_i = ‖x_i − x_{i−1}‖ + ‖x_{i+1} − x_i‖`
/// (one-sided at the ends).
pub fn motion_envelope(frames: &[Vec<f64>]) -> Vec<f64> {
    let n = frames.len();
    let step: Vec<f64> = (1..n)
        .map(|i| {
            frames[i]
                .iter()
                .zip(&frames[i - 1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (0..n)
        .map(|i| {
            let back = if i > 0 { step[i - 1] } else { 0.0 };
            let fwd = if i + 1 < n { step[i] } else { 0.0 };
            back + fwd
        })
        .collect()
}

/// Gesture beats: interior local maxima of the motion envelope that reach
/// `prominence` times the envelope maximum. A plateau counts once, at its
/// first frame.
pub fn gesture_beats_from_motion(
    frames: &[Vec<f64>],
    fps: f64,
    prominence: f64,
) -> Result<BeatSequence> {
    if frames.len() < 3 {
        return Err(Error::Contract(format!(
            "beat extraction needs at least 3 frames, got {}",
            frames.len()
        )));
    }
    if !(fps > 0.0) {
        return Err(Error::Contract(format!("fps must be positive, got {fps}")));
    }
    let e = motion_envelope(frames);
    let top = e.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return Ok(BeatSequence::default());
    }
    let times = (1..e.len() - 1)
        .filter(|&i| e[i] > e[i - 1] && e[i] >= e[i + 1] && e[i] >= prominence * top)
        .map(|i| i as f64 / fps)
        .collect();
    BeatSequence::new(times)
}

fn region_or_full(img: &Image, region: Option<Window>) -> Result<Window> {
    let w = region.unwrap_or(Window::full(img.height(), img.width()));
    if w.x0 >= w.x1 || w.y0 >= w.y1 || w.x1 > img.width() || w.y1 > img.height() {
        return Err(Error::Contract(format!(
            "region {w:?} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    Ok(w)
}

fn check_pair(real: &Image, fake: &Image) -> Result<()> {
    if real.tensor().shape() != fake.tensor().shape() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            real.tensor().shape(),
            fake.tensor().shape()
        )));
    }
    Ok(())
}

pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1 / MSE)` over the region, capped at 99 dB.
pub fn psnr(real: &Image, fake: &Image, region: Option<Window>) -> Result<f64> {
    check_pair(real, fake)?;
    let w = region_or_full(real, region)?;
    let (a, b) = (real.crop(w), fake.crop(w));
    let mse = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.tensor().len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; 7] {
    let mut k = [0.0; 7];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 3.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable 7×7 Gaussian filter with border clamping.
fn blur(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] = (0..7)
                .map(|i| k[i] * x[y * w + clampi(xx as isize + i as isize - 3, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] = (0..7)
                .map(|i| k[i] * tmp[clampi(y as isize + i as isize - 3, h) * w + xx])
                .sum();
        }
    }
    out
}

/// Mean SSIM over channels and pixels of the region, data range 1.
pub fn ssim(real: &Image, fake: &Image, region: Option<Window>) -> Result<f64> {
    check_pair(real, fake)?;
    let win = region_or_full(real, region)?;
    let (a, b) = (real.crop(win), fake.crop(win));
    let (h, w) = (win.height(), win.width());
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..3 {
        let xa = &a.tensor().data()[c * h * w..(c + 1) * h * w];
        let xb = &b.tensor().data()[c * h * w..(c + 1) * h * w];
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mu_a, mu_b) = (blur(xa, h, w), blur(xb, h, w));
        let (saa, sbb, sab) = (
            blur(&prod(xa, xa), h, w),
            blur(&prod(xb, xb), h, w),
            blur(&prod(xa, xb), h, w),
        );
        for i in 0..h * w {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (3 * h * w) as f64)
}

const ENCODER_SEED: u64 = 0xe4c0_de00;

/// Fixed random convolutional image encoder.
#[derive(Clone, Debug)]
pub struct FrameEncoder {
    store: ParamStore,
    convs: [Conv; 2],
    out: Dense,
    patch: usize,
}

impl FrameEncoder {
    /// `dim`-dimensional embeddings of `size × size` images.
    pub fn new(size: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        let mut store = ParamStore::new();
        let patch = (size / 16).max(1);
        let cin = 3 * patch * patch;
        let convs = [
            Conv::new(
                &mut store,
                "enc.conv0",
                cin,
                16,
                (3, 3),
                2,
                he_std(cin * 9, 0.2),
                &mut rng,
            ),
            Conv::new(
                &mut store,
                "enc.conv1",
                16,
                16,
                (3, 3),
                2,
                he_std(144, 0.2),
                &mut rng,
            ),
        ];
        let side = size / patch / 4;
        let flat = 16 * side * side;
        let out = Dense::new(
            &mut store,
            "enc.out",
            flat,
            dim,
            (1.0 / flat as f64).sqrt(),
            &mut rng,
        );
        FrameEncoder {
            store,
            convs,
            out,
            patch,
        }
    }

    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let ts: Vec<Tensor> = images.iter().map(|i| i.tensor().clone()).collect();
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(Tensor::stack(&ts)?);
        let mut h = g.space_to_depth(x, self.patch);
        for c in &self.convs {
            h = c.forward(&mut g, &p, h);
            h = g.leaky(h, 0.2);
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
        let y = self.out.forward(&mut g, &p, flat);
        let d = g.shape(y)[1];
        Ok(g.value(y).data().chunks(d).map(<[f64]>::to_vec).collect())
    }
}

/// Fixed random video encoder: per-frame embeddings of a window of frames,
/// concatenated with their temporal differences and projected.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    frames: FrameEncoder,
    window: usize,
    proj: Vec<f64>,
    dim: usize,
}

impl VideoEncoder {
    pub fn new(size: usize, window: usize, dim: usize) -> Self {
        let frames = FrameEncoder::new(size, 16);
        let din = 16 * (2 * window - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED ^ 0x71de0);
        let proj = Tensor::randn(&[dim, din], (1.0 / din as f64).sqrt(), &mut rng).into_data();
        VideoEncoder {
            frames,
            window,
            proj,
            dim,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// One embedding per non-overlapping window; trailing frames are dropped.
    pub fn embed_clip(&self, frames: &[Image]) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&Image> = frames.iter().collect();
        let per = self.frames.embed(&refs)?;
        let din = 16 * (2 * self.window - 1);
        Ok(per
            .chunks_exact(self.window)
            .map(|win| {
                let mut feat: Vec<f64> = win.concat();
                for pair in win.windows(2) {
                    feat.extend(pair[1].iter().zip(&pair[0]).map(|(a, b)| a - b));
                }
                (0..self.dim)
                    .map(|o| {
                        self.proj[o * din..(o + 1) * din]
                            .iter()
                            .zip(&feat)
                            .map(|(w, x)| w * x)
                            .sum()
                    })
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diversity_arithmetic() {
        let set = |m: f64| EmbeddingSet::new(vec![vec![m - 1.0], vec![m + 1.0]], "t").unwrap();
        assert_eq!(diversity(&[set(0.0), set(3.0)]).unwrap(), 3.0);
        assert!((diversity(&[set(0.0), set(1.0), set(2.0)]).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(diversity(&[set(1.0), set(1.0)]).unwrap(), 0.0);
        assert!(diversity(&[set(1.0)]).is_err());
    }

    #[test]
    fn psnr_of_constant_offset() {
        let a = Image::filled(8, 8, [0.2, 0.5, 0.7]);
        let b = Image::filled(8, 8, [0.3, 0.6, 0.8]);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
        assert_eq!(ssim(&a, &a, None).unwrap(), 1.0);
    }

    #[test]
    fn constant_motion_has_no_beats() {
        let frames = vec![vec![1.0, 2.0]; 10];
        assert!(gesture_beats_from_motion(&frames, 10.0, 0.3)
            .unwrap()
            .is_empty());
        assert!(gesture_beats_from_motion(&frames[..2], 10.0, 0.3).is_err());
    }

    #[test]
    fn bas_rejects_empty() {
        let s = BeatSequence::new(vec![1.0]).unwrap();
        assert!(beat_alignment(&s, &BeatSequence::default(), 0.1).is_err());
        assert!(BeatSequence::new(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn encoders_are_deterministic() {
        let img = Image::filled(64, 64, [0.3, 0.4, 0.5]);
        let e = FrameEncoder::new(64, 8);
        assert_eq!(e.embed(&[&img]).unwrap(), e.embed(&[&img]).unwrap());
        let v = VideoEncoder::new(64, 4, 8);
        let frames = vec![img; 9];
        assert_eq!(v.embed_clip(&frames).unwrap().len(), 2);
    }
}
