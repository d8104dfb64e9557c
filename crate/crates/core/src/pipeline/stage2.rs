use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::Container;
use crate::config::ExperimentConfig;
use crate::deviation_decoder::Generator;
use crate::error::{Error, Result};
use crate::latent_diffusion::{
    Condition, Denoiser, DiffusionSchedule, MotionSequence, PRIOR_FRAMES,
};
use crate::nn::Adam;
use crate::seeding::derive;
use crate::synthetic_data::ClipRecord;
use crate::tensor::Tensor;

use super::{check_model_meta, load_adam, save_adam, save_model_meta, CsvLog};

pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const STAGE2_LOG: &str = "stage2_metrics.csv";
const LOG_HEADER: &str = "step,mf,vel,acc,total,teacher_p";

const TAG_DENOISER: u64 = 0xde05;
const TAG_BATCH: u64 = 0x52ba;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Row {
    pub step: usize,
    pub mf: f64,
    pub vel: f64,
    pub acc: f64,
    pub total: f64,
    /// Probability that prior frames came from model predictions.
    pub teacher_p: f64,
}

impl Stage2Row {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.6}",
            self.step, self.mf, self.vel, self.acc, self.total, self.teacher_p
        )
    }
}

/// Per-dimension standardization of motion features.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MotionNorm {
    fn fit(frames: &[&[f64]], k: usize) -> Self {
        let n = frames.len().max(1) as f64;
        let mut mean = vec![0.0; k];
        for f in frames {
            for (m, v) in mean.iter_mut().zip(*f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; k];
        for f in frames {
            for ((s, v), m) in var.iter_mut().zip(*f).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 })
            .collect();
        MotionNorm { mean, std }
    }

    pub fn normalize(&self, mf: &[f64]) -> Vec<f64> {
        mf.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }
}

/// Everything inference needs: the stage-1 generator (pose encoder and
/// decoder), the denoiser and the motion-feature normalization.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub generator: Generator,
    pub denoiser: Denoiser,
    pub norm: MotionNorm,
    pub schedule: DiffusionSchedule,
}

/// Raw motion features of every frame, per clip.
pub fn encode_clips(gen: &Generator, clips: &[ClipRecord]) -> Result<Vec<Vec<Vec<f64>>>> {
    clips
        .iter()
        .map(|c| {
            let mut out = Vec::with_capacity(c.len());
            for chunk in c.frames.chunks(32) {
                let refs: Vec<_> = chunk.iter().collect();
                out.extend(gen.encode_batch(&refs)?.into_iter().map(|m| m.0));
            }
            Ok(out)
        })
        .collect()
}

struct Track {
    /// Normalized features per frame.
    mf: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
}

struct Window {
    track: usize,
    start: usize,
    source: usize,
}

pub struct Stage2Trainer {
    cfg: ExperimentConfig,
    denoiser: Denoiser,
    sched: DiffusionSchedule,
    norm: MotionNorm,
    opt: Adam,
    tracks: Vec<Track>,
    step: usize,
}

impl Stage2Trainer {
    /// Encodes `clips` with the frozen pose encoder of `gen`.
    pub fn new(cfg: &ExperimentConfig, gen: &Generator, clips: &[ClipRecord]) -> Result<Self> {
        cfg.validate()?;
        let (m, a, k) = (
            cfg.diffusion.chunk_len,
            cfg.diffusion.audio_dim,
            cfg.model.motion_dim,
        );
        for c in clips {
            if c.audio_dim() != a && !c.is_empty() {
                return Err(Error::Data(format!(
                    "clip {} has {} audio features, config expects {a}",
                    c.id,
                    c.audio_dim()
                )));
            }
        }
        if !clips.iter().any(|c| c.len() >= m) {
            return Err(Error::Data(format!(
                "stage-2 training needs a clip with at least {m} frames"
            )));
        }
        let raw = encode_clips(gen, clips)?;
        let all: Vec<&[f64]> = raw.iter().flatten().map(|v| v.as_slice()).collect();
        let norm = MotionNorm::fit(&all, k);
        let tracks = raw
            .iter()
            .zip(clips)
            .filter(|(_, c)| c.len() >= m)
            .map(|(mf, c)| Track {
                mf: mf.iter().map(|v| norm.normalize(v)).collect(),
                audio: c.audio.clone(),
            })
            .collect();
        let denoiser = Denoiser::new(k, &cfg.diffusion, derive(cfg.seed, TAG_DENOISER, 0));
        Ok(Stage2Trainer {
            opt: Adam::new(denoiser.params(), cfg.stage2.lr),
            sched: DiffusionSchedule::from_config(&cfg.diffusion)?,
            cfg: cfg.clone(),
            denoiser,
            norm,
            tracks,
            step: 0,
        })
    }

    /// Restores denoiser and optimizer state saved by [`Stage2Trainer::save`].
    pub fn resume(
        cfg: &ExperimentConfig,
        gen: &Generator,
        clips: &[ClipRecord],
        path: &Path,
    ) -> Result<Self> {
        let mut t = Self::new(cfg, gen, clips)?;
        let c = Container::load(path)?;
        check_model_meta(&c, cfg, path)?;
        let wrap = |e: Error| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        t.denoiser.load_from(&c, "den.").map_err(wrap)?;
        t.opt = load_adam(&c, "opt", t.denoiser.params(), cfg.stage2.lr).map_err(wrap)?;
        t.norm = load_norm(&c, cfg.model.motion_dim).map_err(wrap)?;
        t.step = c
            .scalar("meta.step")
            .ok_or_else(|| wrap(Error::Contract("missing meta.step".into())))?
            as usize;
        Ok(t)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn norm(&self) -> &MotionNorm {
        &self.norm
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        save_model_meta(&mut c, &self.cfg);
        let d = &self.cfg.diffusion;
        c.insert_scalar("meta.chunk_len", d.chunk_len as f64);
        c.insert_scalar("meta.audio_dim", d.audio_dim as f64);
        c.insert_scalar("meta.step", self.step as f64);
        let k = self.norm.mean.len();
        c.insert("norm.mean", Tensor::from_vec(&[k], self.norm.mean.clone())?);
        c.insert("norm.std", Tensor::from_vec(&[k], self.norm.std.clone())?);
        self.denoiser.save_into(&mut c, "den.");
        save_adam(&mut c, "opt", &self.opt);
        c.save(path)
    }

    pub fn teacher_p(&self) -> f64 {
        let s = &self.cfg.stage2;
        s.teacher_forcing_max * self.step as f64 / s.steps.max(1) as f64
    }

    fn window_starts(&self, len: usize) -> Vec<usize> {
        let m = self.cfg.diffusion.chunk_len;
        std::iter::once(0).chain(PRIOR_FRAMES..=len - m).collect()
    }

    fn condition(&self, w: &Window, prev4: Vec<f64>) -> Condition {
        let tr = &self.tracks[w.track];
        let m = self.cfg.diffusion.chunk_len;
        Condition {
            audio: tr.audio[w.start..w.start + m]
                .iter()
                .flatten()
                .copied()
                .collect(),
            prev4,
            source_mf: tr.mf[w.source].clone(),
        }
    }

    fn teacher_prev4(&self, w: &Window) -> Vec<f64> {
        let k = self.cfg.model.motion_dim;
        if w.start == 0 {
            return vec![0.0; PRIOR_FRAMES * k];
        }
        self.tracks[w.track].mf[w.start - PRIOR_FRAMES..w.start]
            .iter()
            .flatten()
            .copied()
            .collect()
    }

    fn x0(&self, w: &Window) -> Result<MotionSequence> {
        let m = self.cfg.diffusion.chunk_len;
        MotionSequence::from_frames(&self.tracks[w.track].mf[w.start..w.start + m])
    }

    /// Start of an earlier window whose prediction covers the four frames
    /// before `start`, if one exists among the valid starts.
    fn previous_start(&self, start: usize) -> Option<usize> {
        let m = self.cfg.diffusion.chunk_len;
        if start < PRIOR_FRAMES {
            return None;
        }
        let ps = if start <= m {
            0
        } else {
            (start - m).max(PRIOR_FRAMES)
        };
        (ps + PRIOR_FRAMES <= start).then_some(ps)
    }

    pub fn train_step(&mut self) -> Result<Stage2Row> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.cfg.seed, TAG_BATCH, self.step as u64));
        let (m, k, steps) = (
            self.cfg.diffusion.chunk_len,
            self.cfg.model.motion_dim,
            self.sched.steps(),
        );
        let teacher_p = self.teacher_p();
        let windows: Vec<Window> = (0..self.cfg.stage2.batch)
            .map(|_| {
                let track = rng.random_range(0..self.tracks.len());
                let len = self.tracks[track].mf.len();
                let starts = self.window_starts(len);
                Window {
                    track,
                    start: starts[rng.random_range(0..starts.len())],
                    source: rng.random_range(0..len),
                }
            })
            .collect();

        let mut prev4: Vec<Vec<f64>> = windows.iter().map(|w| self.teacher_prev4(w)).collect();
        // Scheduled sampling: replace teacher priors by one-step predictions
        // of the preceding window.
        let mut replace = Vec::new();
        for (i, w) in windows.iter().enumerate() {
            if rng.random::<f64>() < teacher_p {
                if let Some(ps) = self.previous_start(w.start) {
                    let t = rng.random_range(1..=steps.div_ceil(2));
                    replace.push((i, ps, t));
                }
            }
        }
        if !replace.is_empty() {
            let prev_w: Vec<Window> = replace
                .iter()
                .map(|&(i, ps, _)| Window {
                    track: windows[i].track,
                    start: ps,
                    source: windows[i].source,
                })
                .collect();
            let mut xs = Vec::new();
            let mut conds = Vec::new();
            for (pw, &(_, _, t)) in prev_w.iter().zip(&replace) {
                let x0 = self.x0(pw)?;
                let noise = MotionSequence::standard_normal(m, k, &mut rng);
                xs.push(crate::latent_diffusion::q_sample(
                    &self.sched,
                    &x0,
                    t,
                    &noise,
                )?);
                conds.push(self.condition(pw, self.teacher_prev4(pw)));
            }
            let ts: Vec<usize> = replace.iter().map(|r| r.2).collect();
            let preds = self.denoiser.predict_x0_batch(
                &xs.iter().collect::<Vec<_>>(),
                &ts,
                &conds.iter().collect::<Vec<_>>(),
            )?;
            for ((&(i, ps, _), pred), _) in replace.iter().zip(&preds).zip(&prev_w) {
                let off = windows[i].start - PRIOR_FRAMES - ps;
                prev4[i] = (off..off + PRIOR_FRAMES)
                    .flat_map(|j| pred.frame(j).to_vec())
                    .collect();
            }
        }

        let x0s: Vec<MotionSequence> = windows.iter().map(|w| self.x0(w)).collect::<Result<_>>()?;
        let conds: Vec<Condition> = windows
            .iter()
            .zip(prev4)
            .map(|(w, p)| self.condition(w, p))
            .collect();
        let ts: Vec<usize> = windows
            .iter()
            .map(|_| rng.random_range(1..=steps))
            .collect();
        let noises: Vec<MotionSequence> = windows
            .iter()
            .map(|_| MotionSequence::standard_normal(m, k, &mut rng))
            .collect();

        let mut g = Graph::new();
        let p = self.denoiser.params().bind(&mut g, true);
        let (total, mf, vel, acc) = self.denoiser.loss_graph(
            &mut g,
            &p,
            &x0s.iter().collect::<Vec<_>>(),
            &conds.iter().collect::<Vec<_>>(),
            &ts,
            &noises.iter().collect::<Vec<_>>(),
            &self.sched,
        )?;
        let v = |x| g.value(x).data()[0];
        let row = Stage2Row {
            step: self.step,
            mf: v(mf),
            vel: v(vel),
            acc: v(acc),
            total: v(total),
            teacher_p,
        };
        if !row.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite stage-2 loss at step {}",
                self.step
            )));
        }
        let grads = g.backward(total);
        let gr = p.grads(&g, &grads);
        let s2 = &self.cfg.stage2;
        self.opt.lr = super::cosine_lr(s2.lr, s2.lr_min_ratio, self.step, s2.steps);
        self.opt.step(self.denoiser.params_mut(), &gr);
        self.step += 1;
        Ok(row)
    }
}

fn load_norm(c: &Container, k: usize) -> Result<MotionNorm> {
    let get = |name: &str| -> Result<Vec<f64>> {
        let t = c
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing {name}")))?;
        if t.len() != k {
            return Err(Error::Shape(format!(
                "{name} has {} entries, expected {k}",
                t.len()
            )));
        }
        Ok(t.data().to_vec())
    };
    Ok(MotionNorm {
        mean: get("norm.mean")?,
        std: get("norm.std")?,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Stage2Options {
    pub resume: bool,
    pub stop_after: Option<usize>,
}

pub struct Stage2Outcome {
    pub model: Stage2Model,
    pub rows: Vec<Stage2Row>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains the denoiser on motion features from the frozen stage-1 encoder.
pub fn train_stage2(
    cfg: &ExperimentConfig,
    gen: &Generator,
    clips: &[ClipRecord],
    out: &Path,
    opts: &Stage2Options,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let ckpt = out.join(STAGE2_CHECKPOINT);
    let log_path = out.join(STAGE2_LOG);
    let mut trainer = if opts.resume && ckpt.exists() {
        Stage2Trainer::resume(cfg, gen, clips, &ckpt)?
    } else {
        Stage2Trainer::new(cfg, gen, clips)?
    };
    let mut log = CsvLog::open(
        &log_path,
        LOG_HEADER,
        opts.resume.then_some(trainer.step_count()),
    )?;
    let end = opts
        .stop_after
        .map_or(cfg.stage2.steps, |s| s.min(cfg.stage2.steps));
    let mut rows = Vec::new();
    while trainer.step_count() < end {
        let row = trainer.train_step()?;
        log::debug!("stage2 step {} total {:.5}", row.step, row.total);
        log.row(row.csv());
        rows.push(row);
        let done = trainer.step_count();
        if done % cfg.stage2.checkpoint_every == 0 || done == end {
            log.flush()?;
            trainer.save(&ckpt)?;
        }
    }
    if rows.is_empty() && !ckpt.exists() {
        trainer.save(&ckpt)?;
    }
    log.flush()?;
    Ok(Stage2Outcome {
        model: Stage2Model {
            generator: gen.clone(),
            denoiser: trainer.denoiser.clone(),
            norm: trainer.norm.clone(),
            schedule: trainer.sched.clone(),
        },
        rows,
        checkpoint: ckpt,
        log: log_path,
    })
}

/// Loads the generator and denoiser for inference.
pub fn load_stage2(cfg: &ExperimentConfig, stage1: &Path, stage2: &Path) -> Result<Stage2Model> {
    cfg.validate()?;
    let generator = super::load_generator(cfg, stage1)?;
    if !stage2.exists() {
        return Err(Error::Checkpoint {
            path: stage2.to_path_buf(),
            msg: "stage-2 checkpoint not found".into(),
        });
    }
    let c = Container::load(stage2)?;
    check_model_meta(&c, cfg, stage2)?;
    let wrap = |e: Error| Error::Checkpoint {
        path: stage2.to_path_buf(),
        msg: e.to_string(),
    };
    let d = &cfg.diffusion;
    for (key, v) in [("chunk_len", d.chunk_len), ("audio_dim", d.audio_dim)] {
        if c.scalar(&format!("meta.{key}")).map(|s| s as usize) != Some(v) {
            return Err(wrap(Error::Contract(format!(
                "diffusion.{key} differs from the checkpoint"
            ))));
        }
    }
    let mut denoiser = Denoiser::new(cfg.model.motion_dim, d, 0);
    denoiser.load_from(&c, "den.").map_err(wrap)?;
    Ok(Stage2Model {
        generator,
        denoiser,
        norm: load_norm(&c, cfg.model.motion_dim).map_err(wrap)?,
        schedule: DiffusionSchedule::from_config(d)?,
    })
}
