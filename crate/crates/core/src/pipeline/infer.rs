use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::deviation_decoder::DeviationMap;
use crate::error::{Error, Result};
use crate::image::{save_gray_png, Image};
use crate::latent_diffusion::{Condition, MotionSequence, PRIOR_FRAMES};
use crate::motion_latent::MotionFeature;
use crate::par;
use crate::seeding::derive;
use crate::synthetic_data::{write_clip, ClipRecord};

use super::Stage2Model;

const TAG_CHUNK: u64 = 0x1f3c;
const DECODE_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub frames: Vec<Image>,
    /// Denormalized motion features, one per frame.
    pub motion: Vec<Vec<f64>>,
    pub deviations: Vec<Option<DeviationMap>>,
    /// Condition used for each chunk.
    pub conditions: Vec<Condition>,
    /// Raw (normalized) sampler output per chunk, `M` frames each.
    pub chunks: Vec<MotionSequence>,
}

/// Generates `length` frames animating `source` from `audio` rows.
///
/// Chunks of `M` frames are sampled in order; every chunk after the first is
/// conditioned on the last four frames of its predecessor.
pub fn infer(
    cfg: &ExperimentConfig,
    model: &Stage2Model,
    source: &Image,
    audio: &[Vec<f64>],
    length: usize,
    seed: u64,
) -> Result<InferOutput> {
    let (m, a, k) = (
        cfg.diffusion.chunk_len,
        cfg.diffusion.audio_dim,
        cfg.model.motion_dim,
    );
    if length == 0 {
        return Err(Error::Contract("requested length must be positive".into()));
    }
    if audio.len() < length {
        return Err(Error::Data(format!(
            "audio has {} rows but {length} frames were requested",
            audio.len()
        )));
    }
    if let Some(bad) = audio.iter().position(|r| r.len() != a) {
        return Err(Error::Data(format!(
            "audio row {bad} has {} features, expected {a}",
            audio[bad].len()
        )));
    }
    let source_mf = model
        .norm
        .normalize(&model.generator.encode_pose(source)?.0);
    let n_chunks = length.div_ceil(m);
    let mut conditions = Vec::with_capacity(n_chunks);
    let mut chunks: Vec<MotionSequence> = Vec::with_capacity(n_chunks);
    for c in 0..n_chunks {
        let prev4 = match chunks.last() {
            None => vec![0.0; PRIOR_FRAMES * k],
            Some(prev) => (m - PRIOR_FRAMES..m)
                .flat_map(|i| prev.frame(i).to_vec())
                .collect(),
        };
        // Rows past the end of the audio repeat the last row.
        let audio_chunk: Vec<f64> = (c * m..(c + 1) * m)
            .flat_map(|i| audio[i.min(audio.len() - 1)].iter().copied())
            .collect();
        let cond = Condition {
            audio: audio_chunk,
            prev4,
            source_mf: source_mf.clone(),
        };
        let x = model.denoiser.sample_chunk(
            &model.schedule,
            &cond,
            derive(seed, TAG_CHUNK, c as u64),
        )?;
        conditions.push(cond);
        chunks.push(x);
    }
    check_seams(&conditions, &chunks, k)?;

    let motion: Vec<Vec<f64>> = chunks
        .iter()
        .flat_map(|ch| (0..m).map(move |i| ch.frame(i)))
        .take(length)
        .map(|z| model.norm.denormalize(z))
        .collect();
    if motion.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite motion".into()));
    }
    let mut frames = Vec::with_capacity(length);
    let mut deviations = Vec::with_capacity(length);
    for batch in motion.chunks(DECODE_BATCH) {
        let mfs: Vec<MotionFeature> = batch.iter().map(|v| MotionFeature(v.clone())).collect();
        for (img, d) in model.generator.animate(source, &mfs)? {
            frames.push(img);
            deviations.push(d);
        }
    }
    Ok(InferOutput {
        frames,
        motion,
        deviations,
        conditions,
        chunks,
    })
}

fn check_seams(conditions: &[Condition], chunks: &[MotionSequence], k: usize) -> Result<()> {
    if conditions
        .first()
        .is_some_and(|c| c.prev4.iter().any(|&v| v != 0.0))
    {
        return Err(Error::Contract(
            "first chunk must start from zero prior frames".into(),
        ));
    }
    for (c, pair) in chunks.windows(2).enumerate() {
        let m = pair[0].frames();
        for j in 0..PRIOR_FRAMES {
            let want = pair[0].frame(m - PRIOR_FRAMES + j);
            let got = &conditions[c + 1].prev4[j * k..(j + 1) * k];
            if want
                .iter()
                .zip(got)
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(Error::Contract(format!(
                    "prior frames of chunk {} differ from chunk {c}",
                    c + 1
                )));
            }
        }
    }
    Ok(())
}

/// Writes a generated clip using the audio, regions and beats of `driving`.
pub fn write_generated_clip(out: &InferOutput, driving: &ClipRecord, dir: &Path) -> Result<()> {
    let n = out.frames.len();
    let clip = ClipRecord {
        id: driving.id.clone(),
        fps: driving.fps,
        frames: out.frames.clone(),
        audio: driving.audio[..n].to_vec(),
        regions: driving.regions[..n.min(driving.regions.len())].to_vec(),
        beat_times: driving
            .beat_times
            .iter()
            .copied()
            .filter(|&t| t < n as f64 / driving.fps)
            .collect(),
    };
    write_clip(&clip, dir)
}

/// Runs [`infer`] for every clip (source = its first frame, audio = its
/// audio) and writes `out/<id>/`. Deviation maps go to
/// `out/deviation/<id>/%05d.png` when `dump_deviation` is set.
pub fn infer_dataset(
    cfg: &ExperimentConfig,
    model: &Stage2Model,
    clips: &[ClipRecord],
    out: &Path,
    seed: u64,
    length: Option<usize>,
    dump_deviation: bool,
) -> Result<Vec<PathBuf>> {
    let results = par::map_indexed(clips.len(), |i| -> Result<PathBuf> {
        let clip = &clips[i];
        let source = clip
            .frames
            .first()
            .ok_or_else(|| Error::Data(format!("clip {} has no frames", clip.id)))?;
        let len = length.unwrap_or(clip.len());
        if len > clip.len() {
            return Err(Error::Data(format!(
                "clip {} has {} frames of audio, {len} requested",
                clip.id,
                clip.len()
            )));
        }
        let res = infer(
            cfg,
            model,
            source,
            &clip.audio,
            len,
            derive(seed, 0x1d5e, i as u64),
        )?;
        let dir = out.join(&clip.id);
        write_generated_clip(&res, clip, &dir)?;
        if dump_deviation {
            let ddir = out.join("deviation").join(&clip.id);
            std::fs::create_dir_all(&ddir).map_err(|e| Error::io(&ddir, e))?;
            for (f, d) in res.deviations.iter().enumerate() {
                if let Some(d) = d {
                    let s = d.tensor().shape();
                    let vals = d.mean_map();
                    save_gray_png(&vals, s[1], s[2], &ddir.join(format!("{f:05}.png")))?;
                }
            }
        }
        Ok(dir)
    });
    results.into_iter().collect()
}
