use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::Window;
use crate::metrics::{
    beat_alignment, diversity, frechet_distance, gesture_beats_from_motion, psnr, ssim,
    BeatSequence, EmbeddingSet, FrameEncoder, VideoEncoder,
};
use crate::par;
use crate::stage1_losses::RegionAnnotation;
use crate::synthetic_data::{list_clips, read_clip, ClipRecord};

pub const REPORT_COLUMNS: [&str; 13] = [
    "clip",
    "FGD",
    "Div.",
    "BAS",
    "FVD",
    "PSNR",
    "SSIM",
    "PSNR_hand",
    "SSIM_hand",
    "PSNR_lip",
    "SSIM_lip",
    "PSNR_full",
    "SSIM_full",
];

const EMBED_DIM: usize = 16;
const MOTION_SIDE: usize = 16;

/// Gesture embedding for the Fréchet gesture distance: a fixed random encoder
/// applied to a square crop centred on the annotated hand.
#[derive(Clone, Debug)]
pub struct FgdEncoder {
    frames: FrameEncoder,
    side: usize,
}

impl FgdEncoder {
    pub fn new(image_height: usize, image_width: usize) -> Self {
        let side = (image_height.min(image_width) / 4).max(4);
        FgdEncoder {
            frames: FrameEncoder::new(side, EMBED_DIM),
            side,
        }
    }

    /// Crop side in pixels.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Window of `side` pixels centred on `hand`, shifted to stay inside the frame.
    pub fn window(&self, hand: Window, h: usize, w: usize) -> Window {
        let half = self.side / 2;
        let cy = ((hand.y0 + hand.y1) / 2).clamp(half, h - (self.side - half));
        let cx = ((hand.x0 + hand.x1) / 2).clamp(half, w - (self.side - half));
        Window {
            y0: cy - half,
            y1: cy - half + self.side,
            x0: cx - half,
            x1: cx - half + self.side,
        }
    }

    /// Embeds `frames[i]` around `regions[i].hand`.
    pub fn embed(&self, frames: &[Image], regions: &[RegionAnnotation]) -> Result<Vec<Vec<f64>>> {
        if regions.len() < frames.len() {
            return Err(Error::Data(format!(
                "{} frames but only {} region rows",
                frames.len(),
                regions.len()
            )));
        }
        let crops: Vec<Image> = frames
            .iter()
            .zip(regions)
            .map(|(f, r)| f.crop(self.window(r.hand, f.height(), f.width())))
            .collect();
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(64) {
            out.extend(self.frames.embed(&chunk.iter().collect::<Vec<_>>())?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub clip: String,
    pub fgd: f64,
    pub div: f64,
    pub bas: f64,
    pub fvd: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_hand: f64,
    pub ssim_hand: f64,
    pub psnr_lip: f64,
    pub ssim_lip: f64,
    pub psnr_full: f64,
    pub ssim_full: f64,
}

impl ClipMetrics {
    fn values(&self) -> [f64; 12] {
        [
            self.fgd,
            self.div,
            self.bas,
            self.fvd,
            self.psnr,
            self.ssim,
            self.psnr_hand,
            self.ssim_hand,
            self.psnr_lip,
            self.ssim_lip,
            self.psnr_full,
            self.ssim_full,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    /// Pooled over every matched clip, labelled `ALL`.
    pub all: ClipMetrics,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        for row in self.clips.iter().chain(std::iter::once(&self.all)) {
            s.push_str(&row.clip);
            for v in row.values() {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

struct Embedded {
    frames: Vec<Vec<f64>>,
    windows: Vec<Vec<f64>>,
}

struct PerClip {
    metrics: ClipMetrics,
    gen: Embedded,
    real: Embedded,
    quality: [Vec<f64>; 6],
}

/// Average-pooled grayscale frames as motion vectors for beat extraction.
fn motion_vectors(frames: &[Image]) -> Vec<Vec<f64>> {
    frames
        .iter()
        .map(|f| {
            let (h, w) = (f.height(), f.width());
            let (sy, sx) = ((h / MOTION_SIDE).max(1), (w / MOTION_SIDE).max(1));
            let mut v = Vec::with_capacity(MOTION_SIDE * MOTION_SIDE);
            for by in 0..h / sy {
                for bx in 0..w / sx {
                    let mut acc = 0.0;
                    for y in by * sy..(by + 1) * sy {
                        for x in bx * sx..(bx + 1) * sx {
                            acc += (0..3).map(|c| f.get(c, y, x)).sum::<f64>();
                        }
                    }
                    v.push(acc / (3 * sy * sx) as f64);
                }
            }
            v
        })
        .collect()
}

fn frechet_or_nan(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Ok(f64::NAN);
    }
    frechet_distance(
        &EmbeddingSet::new(a.to_vec(), "generated")?,
        &EmbeddingSet::new(b.to_vec(), "reference")?,
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn bas_for(cfg: &ExperimentConfig, speech: &[f64], frames: &[Image], fps: f64) -> Result<f64> {
    if speech.is_empty() || frames.len() < 3 {
        return Ok(f64::NAN);
    }
    let gesture =
        gesture_beats_from_motion(&motion_vectors(frames), fps, cfg.eval.beat_prominence)?;
    if gesture.is_empty() {
        return Ok(0.0);
    }
    beat_alignment(
        &BeatSequence::new(speech.to_vec())?,
        &gesture,
        cfg.eval.bas_sigma,
    )
}

fn clip_diversity(windows: &[Vec<f64>]) -> Result<f64> {
    if windows.len() < 2 {
        return Ok(f64::NAN);
    }
    let sets = windows
        .iter()
        .map(|w| EmbeddingSet::new(vec![w.clone()], "window"))
        .collect::<Result<Vec<_>>>()?;
    diversity(&sets)
}

fn evaluate_clip(
    cfg: &ExperimentConfig,
    fgd: &FgdEncoder,
    video: &VideoEncoder,
    gen: &ClipRecord,
    real: &ClipRecord,
) -> Result<PerClip> {
    let n = gen.len().min(real.len());
    if n == 0 {
        return Err(Error::Data(format!(
            "clip {} has no frames to compare",
            gen.id
        )));
    }
    if gen.len() != real.len() {
        log::warn!(
            "clip {}: comparing the first {n} frames ({} generated, {} reference)",
            gen.id,
            gen.len(),
            real.len()
        );
    }
    let (gf, rf) = (&gen.frames[..n], &real.frames[..n]);
    let g_emb = Embedded {
        frames: fgd.embed(gf, &real.regions[..n])?,
        windows: video.embed_clip(gf)?,
    };
    let r_emb = Embedded {
        frames: fgd.embed(rf, &real.regions[..n])?,
        windows: video.embed_clip(rf)?,
    };
    let mut q: [Vec<f64>; 6] = Default::default();
    for i in 0..n {
        let reg = real.regions[i];
        let (a, b) = (&rf[i], &gf[i]);
        q[0].push(psnr(a, b, Some(reg.hand))?);
        q[1].push(ssim(a, b, Some(reg.hand))?);
        q[2].push(psnr(a, b, Some(reg.lip()))?);
        q[3].push(ssim(a, b, Some(reg.lip()))?);
        q[4].push(psnr(a, b, None)?);
        q[5].push(ssim(a, b, None)?);
    }
    let speech: Vec<f64> = real
        .beat_times
        .iter()
        .copied()
        .filter(|&t| t < n as f64 / real.fps)
        .collect();
    let metrics = ClipMetrics {
        clip: gen.id.clone(),
        fgd: frechet_or_nan(&g_emb.frames, &r_emb.frames)?,
        div: clip_diversity(&g_emb.windows)?,
        bas: bas_for(cfg, &speech, gf, real.fps)?,
        fvd: frechet_or_nan(&g_emb.windows, &r_emb.windows)?,
        psnr: mean(&q[4]),
        ssim: mean(&q[5]),
        psnr_hand: mean(&q[0]),
        ssim_hand: mean(&q[1]),
        psnr_lip: mean(&q[2]),
        ssim_lip: mean(&q[3]),
        psnr_full: mean(&q[4]),
        ssim_full: mean(&q[5]),
    };
    Ok(PerClip {
        metrics,
        gen: g_emb,
        real: r_emb,
        quality: q,
    })
}

fn read_by_id(root: &Path) -> Result<BTreeMap<String, ClipRecord>> {
    let mut out = BTreeMap::new();
    for dir in list_clips(root)? {
        let clip = read_clip(&dir)?;
        out.insert(clip.id.clone(), clip);
    }
    Ok(out)
}

/// Compares generated clips against references with matching ids.
pub fn evaluate(cfg: &ExperimentConfig, generated: &Path, reference: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let gen = read_by_id(generated)?;
    let real = read_by_id(reference)?;
    let only_gen: Vec<&str> = gen
        .keys()
        .filter(|k| !real.contains_key(*k))
        .map(String::as_str)
        .collect();
    let only_real: Vec<&str> = real
        .keys()
        .filter(|k| !gen.contains_key(*k))
        .map(String::as_str)
        .collect();
    let matched: Vec<&String> = gen.keys().filter(|k| real.contains_key(*k)).collect();
    if matched.is_empty() || !only_gen.is_empty() || !only_real.is_empty() {
        return Err(Error::Data(format!(
            "clip ids do not match: {} matched; only in generated: [{}]; only in reference: [{}]",
            matched.len(),
            only_gen.join(", "),
            only_real.join(", ")
        )));
    }
    evaluate_clips(
        cfg,
        &matched.iter().map(|k| &gen[*k]).collect::<Vec<_>>(),
        &matched.iter().map(|k| &real[*k]).collect::<Vec<_>>(),
    )
}

/// Metrics for paired in-memory clips.
pub fn evaluate_clips(
    cfg: &ExperimentConfig,
    generated: &[&ClipRecord],
    reference: &[&ClipRecord],
) -> Result<EvalReport> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::Data(format!(
            "need equal nonempty clip lists, got {} generated and {} reference",
            generated.len(),
            reference.len()
        )));
    }
    let size = cfg.model.image_height;
    let fgd = FgdEncoder::new(size, cfg.model.image_width);
    let video = VideoEncoder::new(size, cfg.eval.fvd_window, EMBED_DIM);
    let per: Vec<PerClip> = par::map_indexed(generated.len(), |i| {
        evaluate_clip(cfg, &fgd, &video, generated[i], reference[i])
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let pool = |windowed: bool, real: bool| -> Vec<Vec<f64>> {
        per.iter()
            .flat_map(|p| {
                let e = if real { &p.real } else { &p.gen };
                if windowed {
                    e.windows.clone()
                } else {
                    e.frames.clone()
                }
            })
            .collect()
    };
    let div = if per.len() >= 2 {
        let sets = per
            .iter()
            .map(|p| EmbeddingSet::new(p.gen.frames.clone(), p.metrics.clip.clone()))
            .collect::<Result<Vec<_>>>()?;
        diversity(&sets)?
    } else {
        per[0].metrics.div
    };
    let q = |j: usize| {
        mean(
            &per.iter()
                .flat_map(|p| p.quality[j].clone())
                .collect::<Vec<_>>(),
        )
    };
    let all = ClipMetrics {
        clip: "ALL".into(),
        fgd: frechet_or_nan(&pool(false, false), &pool(false, true))?,
        div,
        bas: mean(&per.iter().map(|p| p.metrics.bas).collect::<Vec<_>>()),
        fvd: frechet_or_nan(&pool(true, false), &pool(true, true))?,
        psnr: q(4),
        ssim: q(5),
        psnr_hand: q(0),
        ssim_hand: q(1),
        psnr_lip: q(2),
        ssim_lip: q(3),
        psnr_full: q(4),
        ssim_full: q(5),
    };
    Ok(EvalReport {
        clips: per.into_iter().map(|p| p.metrics).collect(),
        all,
    })
}
