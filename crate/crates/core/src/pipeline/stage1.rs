use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::Container;
use crate::config::ExperimentConfig;
use crate::deviation_decoder::Generator;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr;
use crate::nn::Adam;
use crate::seeding::derive;
use crate::stage1_losses::{
    stage1_total, Discriminator, LossWeights, PerceptualExtractor, RegionAnnotation, Stage1Parts,
};
use crate::synthetic_data::ClipRecord;

use super::{check_model_meta, load_adam, save_adam, save_model_meta, CsvLog};

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE1_LOG: &str = "stage1_metrics.csv";
const LOG_HEADER: &str = "step,per_glo,per_loc,hand,face,gan,discr,total,psnr";

const TAG_GEN: u64 = 0x6e41;
const TAG_DISC: u64 = 0xd15c;
const TAG_BATCH: u64 = 0xba7c;

/// One metrics-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Row {
    pub step: usize,
    pub parts: Stage1Parts,
    pub hand: f64,
    pub face: f64,
    pub total: f64,
    /// Mean batch PSNR of the reconstructions before the update.
    pub psnr: f64,
}

impl Stage1Row {
    pub fn csv(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.6}",
            self.step,
            p.per_glo,
            p.per_loc,
            self.hand,
            self.face,
            p.gan,
            p.discr,
            self.total,
            self.psnr
        )
    }
}

struct Sample<'a> {
    source: &'a Image,
    driving: &'a Image,
    regions: RegionAnnotation,
}

/// Alternating generator/discriminator optimizer state.
pub struct Stage1Trainer {
    cfg: ExperimentConfig,
    gen: Generator,
    disc: Discriminator,
    percep: PerceptualExtractor,
    opt_g: Adam,
    opt_d: Adam,
    weights: LossWeights,
    step: usize,
}

impl Stage1Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(&cfg.model, derive(cfg.seed, TAG_GEN, 0));
        let disc = Discriminator::new(derive(cfg.seed, TAG_DISC, 0));
        let s = &cfg.stage1;
        Ok(Stage1Trainer {
            opt_g: Adam::new(gen.params(), s.lr),
            opt_d: Adam::new(disc.params(), s.disc_lr),
            weights: LossWeights::new(s.lambda_per, s.lambda_gan, s.lambda_discr)?,
            percep: PerceptualExtractor::default(),
            cfg: cfg.clone(),
            gen,
            disc,
            step: 0,
        })
    }

    /// Restores a trainer saved by [`Stage1Trainer::save`].
    pub fn resume(cfg: &ExperimentConfig, path: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let c = Container::load(path)?;
        check_model_meta(&c, cfg, path)?;
        let wrap = |e: Error| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        t.gen.load_from(&c, "gen.").map_err(wrap)?;
        t.disc.load_from(&c, "disc.").map_err(wrap)?;
        t.opt_g = load_adam(&c, "opt_g", t.gen.params(), cfg.stage1.lr).map_err(wrap)?;
        t.opt_d = load_adam(&c, "opt_d", t.disc.params(), cfg.stage1.disc_lr).map_err(wrap)?;
        t.step = c
            .scalar("meta.step")
            .ok_or_else(|| wrap(Error::Contract("missing meta.step".into())))?
            as usize;
        Ok(t)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn into_generator(self) -> Generator {
        self.gen
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        save_model_meta(&mut c, &self.cfg);
        c.insert_scalar("meta.step", self.step as f64);
        self.gen.save_into(&mut c, "gen.");
        self.disc.save_into(&mut c, "disc.");
        save_adam(&mut c, "opt_g", &self.opt_g);
        save_adam(&mut c, "opt_d", &self.opt_d);
        c.save(path)
    }

    fn sample<'a>(&self, clips: &[&'a ClipRecord]) -> Vec<Sample<'a>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.cfg.seed, TAG_BATCH, self.step as u64));
        (0..self.cfg.stage1.batch)
            .map(|_| {
                let clip = clips[rng.random_range(0..clips.len())];
                let d = rng.random_range(0..clip.len());
                let s = if rng.random::<f64>() < self.cfg.stage1.self_pair_prob {
                    d
                } else {
                    rng.random_range(0..clip.len())
                };
                Sample {
                    source: &clip.frames[s],
                    driving: &clip.frames[d],
                    regions: clip.regions[d],
                }
            })
            .collect()
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, clips: &[ClipRecord]) -> Result<Stage1Row> {
        if clips.iter().all(|c| c.is_empty()) {
            return Err(Error::Data(
                "stage-1 training needs at least one nonempty clip".into(),
            ));
        }
        let clips: Vec<&ClipRecord> = clips.iter().filter(|c| !c.is_empty()).collect();
        let batch = self.sample(&clips);
        let s1 = &self.cfg.stage1;
        let w = self.weights;

        let mut g = Graph::new();
        let p = self.gen.params().bind(&mut g, true);
        let sources: Vec<&Image> = batch.iter().map(|b| b.source).collect();
        let drivings: Vec<&Image> = batch.iter().map(|b| b.driving).collect();
        let regions: Vec<RegionAnnotation> = batch.iter().map(|b| b.regions).collect();
        let src = self.gen.batch(&mut g, &sources)?;
        let drv = self.gen.batch(&mut g, &drivings)?;
        let fwd = self.gen.reconstruct_graph(&mut g, &p, src, drv);
        let glo = self
            .percep
            .global_graph(&mut g, drv, fwd.recon, &s1.pyramid);
        let (hand, face) = self
            .percep
            .local_graph(&mut g, drv, fwd.recon, &regions, s1.local_size);
        let loc = g.add(hand, face);
        let per = g.add(glo, loc);
        let mut total = g.scale(per, w.lambda_per);
        let mut gan_value = 0.0;
        if w.lambda_gan > 0.0 {
            let dp = self.disc.params().bind(&mut g, false);
            let gan = self.disc.g_loss_graph(&mut g, &dp, fwd.recon);
            gan_value = g.value(gan).data()[0];
            let weighted = g.scale(gan, w.lambda_gan);
            total = g.add(total, weighted);
        }
        let fake = g.value(fwd.recon).clone();
        if !g.value(total).all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite stage-1 loss at step {}",
                self.step
            )));
        }
        let mut row_psnr = 0.0;
        for (i, real) in drivings.iter().enumerate() {
            row_psnr += psnr(real, &Image::from_clamped(fake.index0(i))?, None)?;
        }
        row_psnr /= batch.len() as f64;
        let (glo_v, hand_v, face_v) = (
            g.value(glo).data()[0],
            g.value(hand).data()[0],
            g.value(face).data()[0],
        );
        let grads = g.backward(total);
        let gg = p.grads(&g, &grads);
        self.opt_g.lr = super::cosine_lr(s1.lr, s1.lr_min_ratio, self.step, s1.steps);
        self.opt_g.step(self.gen.params_mut(), &gg);

        let mut discr = 0.0;
        if w.lambda_discr > 0.0 {
            let mut g = Graph::new();
            let dp = self.disc.params().bind(&mut g, true);
            let real = self.gen.batch(&mut g, &drivings)?;
            let fake = g.constant(fake);
            let d = self.disc.d_loss_graph(&mut g, &dp, real, fake);
            discr = g.value(d).data()[0];
            let grads = g.backward(d);
            let dg = dp.grads(&g, &grads);
            self.opt_d.step(self.disc.params_mut(), &dg);
        }

        let parts = Stage1Parts {
            per_glo: glo_v,
            per_loc: hand_v + face_v,
            gan: gan_value,
            discr,
        };
        let row = Stage1Row {
            step: self.step,
            parts,
            hand: hand_v,
            face: face_v,
            total: stage1_total(&parts, &w)?,
            psnr: row_psnr,
        };
        self.step += 1;
        Ok(row)
    }
}

/// Controls for [`train_stage1`].
#[derive(Clone, Debug, Default)]
pub struct Stage1Options {
    /// Continue from `out/stage1.ckpt` if present.
    pub resume: bool,
    /// Stop (after checkpointing) once this many total steps are done.
    pub stop_after: Option<usize>,
}

pub struct Stage1Outcome {
    pub generator: Generator,
    pub rows: Vec<Stage1Row>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains stage 1 on `clips`, writing the checkpoint and metrics log in `out`.
pub fn train_stage1(
    cfg: &ExperimentConfig,
    clips: &[ClipRecord],
    out: &Path,
    opts: &Stage1Options,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    check_clips(cfg, clips)?;
    let ckpt = out.join(STAGE1_CHECKPOINT);
    let log_path = out.join(STAGE1_LOG);
    let mut trainer = if opts.resume && ckpt.exists() {
        Stage1Trainer::resume(cfg, &ckpt)?
    } else {
        Stage1Trainer::new(cfg)?
    };
    let mut log = CsvLog::open(
        &log_path,
        LOG_HEADER,
        opts.resume.then_some(trainer.step_count()),
    )?;
    let end = opts
        .stop_after
        .map_or(cfg.stage1.steps, |s| s.min(cfg.stage1.steps));
    let mut rows = Vec::new();
    while trainer.step_count() < end {
        let row = trainer.train_step(clips)?;
        log::debug!(
            "stage1 step {} total {:.5} psnr {:.2}",
            row.step,
            row.total,
            row.psnr
        );
        log.row(row.csv());
        rows.push(row);
        let done = trainer.step_count();
        if done % cfg.stage1.checkpoint_every == 0 || done == end {
            log.flush()?;
            trainer.save(&ckpt)?;
        }
    }
    if rows.is_empty() && !ckpt.exists() {
        trainer.save(&ckpt)?;
    }
    log.flush()?;
    Ok(Stage1Outcome {
        generator: trainer.into_generator(),
        rows,
        checkpoint: ckpt,
        log: log_path,
    })
}

fn check_clips(cfg: &ExperimentConfig, clips: &[ClipRecord]) -> Result<()> {
    if clips.iter().all(|c| c.is_empty()) {
        return Err(Error::Data("no training frames found".into()));
    }
    let (h, w) = (cfg.model.image_height, cfg.model.image_width);
    for c in clips {
        if let Some(f) = c.frames.first() {
            if f.height() != h || f.width() != w {
                return Err(Error::Data(format!(
                    "clip {} has {}x{} frames, config expects {h}x{w}",
                    c.id,
                    f.height(),
                    f.width()
                )));
            }
        }
    }
    Ok(())
}

/// Loads the generator weights from a stage-1 checkpoint.
pub fn load_generator(cfg: &ExperimentConfig, path: &Path) -> Result<Generator> {
    if !path.exists() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: "stage-1 checkpoint not found".into(),
        });
    }
    let c = Container::load(path)?;
    check_model_meta(&c, cfg, path)?;
    let mut gen = Generator::new(&cfg.model, 0);
    gen.load_from(&c, "gen.").map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(gen)
}

/// Mean PSNR of `reconstruct(frame, frame)` over every frame of `clips`.
pub fn reconstruction_psnr(gen: &Generator, clips: &[ClipRecord]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for clip in clips {
        for chunk in clip.frames.chunks(16) {
            let mfs = gen.encode_batch(&chunk.iter().collect::<Vec<_>>())?;
            for (frame, mf) in chunk.iter().zip(mfs) {
                let (img, _) = gen.animate(frame, &[mf])?.remove(0);
                total += psnr(frame, &img, None)?;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("no frames to reconstruct".into()));
    }
    Ok(total / n as f64)
}
