//! Declarative experiment configuration (TOML) with up-front validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// How the decoder combines source and warped features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Deviation-gated interpolation between `F` and `U(F)`.
    Deviation,
    /// Ablation: decode the warped enhanced features directly.
    DirectWarp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub feature_height: usize,
    pub feature_width: usize,
    /// Motion feature length K.
    pub motion_dim: usize,
    /// Feature channels C.
    pub channels: usize,
    /// Cells per side of the coarse rotation/translation grid.
    pub coarse_grid: usize,
    pub encoder_width: usize,
    pub pose_hidden: usize,
    /// Upper bound L of the deviation map.
    pub deviation_cap: f64,
    /// Negative-side slope of the decoder activation.
    pub c_lambda: f64,
    pub gate: GateMode,
    /// Use enhanced features `F'`; `false` feeds `F` in their place.
    pub enhance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            feature_height: 16,
            feature_width: 16,
            motion_dim: 32,
            channels: 64,
            coarse_grid: 4,
            encoder_width: 32,
            pose_hidden: 64,
            deviation_cap: 1.0,
            c_lambda: 0.2,
            gate: GateMode::Deviation,
            enhance: true,
        }
    }
}

impl ModelConfig {
    /// Pixel-to-feature downsampling factor.
    pub fn patch(&self) -> usize {
        self.image_height / self.feature_height.max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Frames per generated chunk (M).
    pub chunk_len: usize,
    /// Denoising steps (T).
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub audio_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            chunk_len: 16,
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            audio_dim: 8,
            hidden: 64,
            blocks: 3,
            lambda_vel: 1.0,
            lambda_acc: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub lr: f64,
    pub disc_lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub lambda_per: f64,
    pub lambda_gan: f64,
    pub lambda_discr: f64,
    /// Resolutions of the perceptual pyramid, largest first.
    pub pyramid: Vec<usize>,
    /// Side of the resized hand/face crops.
    pub local_size: usize,
    pub checkpoint_every: usize,
    /// Fraction of pairs where the driving frame is also the source.
    pub self_pair_prob: f64,
    /// Cosine decay floor of the generator learning rate, as a fraction
    /// of `lr`; 1 keeps the rate constant.
    pub lr_min_ratio: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lr: 3e-4,
            disc_lr: 1e-3,
            steps: 500,
            batch: 4,
            lambda_per: 10.0,
            lambda_gan: 1.0,
            lambda_discr: 1.0,
            pyramid: vec![64, 32],
            local_size: 16,
            checkpoint_every: 100,
            self_pair_prob: 0.0,
            lr_min_ratio: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Final probability of replacing ground-truth prior frames with
    /// model predictions (ramped linearly from 0).
    pub teacher_forcing_max: f64,
    pub checkpoint_every: usize,
    /// Cosine decay floor of the learning rate, as a fraction of `lr`.
    pub lr_min_ratio: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 2e-3,
            steps: 1500,
            batch: 16,
            teacher_forcing_max: 0.5,
            checkpoint_every: 500,
            lr_min_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub clips: usize,
    pub duration_s: f64,
    pub fps: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            clips: 8,
            duration_s: 4.0,
            fps: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Gaussian width (seconds) of the beat alignment kernel.
    pub bas_sigma: f64,
    /// Frames per clip window embedded for FVD.
    pub fvd_window: usize,
    /// Relative prominence a motion peak needs to count as a beat.
    pub beat_prominence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bas_sigma: 0.1,
            fvd_window: 8,
            beat_prominence: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn positive(errs: &mut Vec<String>, name: &str, v: usize) {
    if v == 0 {
        errs.push(format!("{name} must be positive"));
    }
}

fn finite_nonneg(errs: &mut Vec<String>, name: &str, v: f64) {
    if !v.is_finite() || v < 0.0 {
        errs.push(format!("{name} must be finite and >= 0 (got {v})"));
    }
}

fn finite_pos(errs: &mut Vec<String>, name: &str, v: f64) {
    if !v.is_finite() || v <= 0.0 {
        errs.push(format!("{name} must be finite and > 0 (got {v})"));
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Validation(vec![format!("config parse: {e}")]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization; independent of key order
    /// in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every dimensional and numeric constraint, reporting all
    /// violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut e = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            e.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let m = &self.model;
        positive(&mut e, "model.image_height", m.image_height);
        positive(&mut e, "model.image_width", m.image_width);
        positive(&mut e, "model.feature_height", m.feature_height);
        positive(&mut e, "model.feature_width", m.feature_width);
        positive(&mut e, "model.motion_dim", m.motion_dim);
        positive(&mut e, "model.channels", m.channels);
        positive(&mut e, "model.coarse_grid", m.coarse_grid);
        positive(&mut e, "model.encoder_width", m.encoder_width);
        positive(&mut e, "model.pose_hidden", m.pose_hidden);
        if m.feature_height > 0 && m.feature_width > 0 {
            if !m.image_height.is_multiple_of(m.feature_height)
                || !m.image_width.is_multiple_of(m.feature_width)
            {
                e.push(format!(
                    "image {}x{} is not an integer multiple of feature grid {}x{}",
                    m.image_height, m.image_width, m.feature_height, m.feature_width
                ));
            } else if m.image_height / m.feature_height != m.image_width / m.feature_width {
                e.push("image-to-feature downsampling must be equal on both axes".into());
            }
            if !m.feature_height.is_multiple_of(4) || !m.feature_width.is_multiple_of(4) {
                e.push(format!(
                    "feature grid {}x{} must be divisible by 4 (pose encoder strides)",
                    m.feature_height, m.feature_width
                ));
            }
            if m.coarse_grid > 0
                && (m.coarse_grid > m.feature_height || m.coarse_grid > m.feature_width)
            {
                e.push(format!(
                    "coarse_grid {} exceeds feature grid {}x{}",
                    m.coarse_grid, m.feature_height, m.feature_width
                ));
            }
        }
        finite_pos(&mut e, "model.deviation_cap", m.deviation_cap);
        finite_nonneg(&mut e, "model.c_lambda", m.c_lambda);

        let d = &self.diffusion;
        if d.chunk_len < 4 {
            e.push(format!(
                "diffusion.chunk_len {} must be >= 4 (four prior frames seed the next chunk)",
                d.chunk_len
            ));
        }
        positive(&mut e, "diffusion.steps", d.steps);
        positive(&mut e, "diffusion.audio_dim", d.audio_dim);
        positive(&mut e, "diffusion.hidden", d.hidden);
        if !(d.beta_start > 0.0 && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            e.push(format!(
                "diffusion betas must satisfy 0 < beta_start <= beta_end < 1 (got {} .. {})",
                d.beta_start, d.beta_end
            ));
        }
        finite_nonneg(&mut e, "diffusion.lambda_vel", d.lambda_vel);
        finite_nonneg(&mut e, "diffusion.lambda_acc", d.lambda_acc);

        let s1 = &self.stage1;
        finite_pos(&mut e, "stage1.lr", s1.lr);
        finite_pos(&mut e, "stage1.disc_lr", s1.disc_lr);
        if !(s1.lr_min_ratio > 0.0 && s1.lr_min_ratio <= 1.0) {
            e.push("stage1.lr_min_ratio must lie in (0, 1]".into());
        }
        positive(&mut e, "stage1.batch", s1.batch);
        positive(&mut e, "stage1.local_size", s1.local_size);
        finite_nonneg(&mut e, "stage1.lambda_per", s1.lambda_per);
        finite_nonneg(&mut e, "stage1.lambda_gan", s1.lambda_gan);
        finite_nonneg(&mut e, "stage1.lambda_discr", s1.lambda_discr);
        if s1.lambda_per + s1.lambda_gan + s1.lambda_discr <= 0.0 {
            e.push("at least one stage1 loss weight must be positive".into());
        }
        if !(0.0..=1.0).contains(&s1.self_pair_prob) {
            e.push("stage1.self_pair_prob must lie in [0, 1]".into());
        }
        if s1.pyramid.is_empty() {
            e.push("stage1.pyramid needs at least one level".into());
        }
        for &lvl in &s1.pyramid {
            if lvl == 0
                || lvl > m.image_height
                || !m.image_height.is_multiple_of(lvl)
                || !(m.image_height / lvl).is_power_of_two()
            {
                e.push(format!(
                    "stage1.pyramid level {lvl} must be image_height / 2^k"
                ));
            }
        }
        if m.image_height != m.image_width && s1.pyramid.len() > 1 {
            e.push("multi-level pyramid requires square images".into());
        }

        let s2 = &self.stage2;
        finite_pos(&mut e, "stage2.lr", s2.lr);
        if !(s2.lr_min_ratio > 0.0 && s2.lr_min_ratio <= 1.0) {
            e.push("stage2.lr_min_ratio must lie in (0, 1]".into());
        }
        positive(&mut e, "stage2.batch", s2.batch);
        if !(0.0..=1.0).contains(&s2.teacher_forcing_max) {
            e.push("stage2.teacher_forcing_max must lie in [0, 1]".into());
        }

        let dc = &self.data;
        finite_pos(&mut e, "data.fps", dc.fps);
        if !(dc.duration_s >= 1.0) {
            e.push(format!(
                "data.duration_s must be >= 1 (got {})",
                dc.duration_s
            ));
        }
        positive(&mut e, "data.clips", dc.clips);

        let ev = &self.eval;
        finite_pos(&mut e, "eval.bas_sigma", ev.bas_sigma);
        if ev.fvd_window < 2 {
            e.push("eval.fvd_window must be >= 2".into());
        }
        if !(0.0..1.0).contains(&ev.beat_prominence) {
            e.push("eval.beat_prominence must lie in [0, 1)".into());
        }

        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(e))
        }
    }

    /// Checks that configured paths exist; run only when a command needs them.
    pub fn validate_paths(&self) -> Result<()> {
        match &self.data.train_dir {
            Some(p) if !p.is_dir() => Err(Error::Data(format!(
                "data.train_dir {} does not exist",
                p.display()
            ))),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn reports_every_violation() {
        let mut c = ExperimentConfig::default();
        c.model.feature_height = 15;
        c.diffusion.chunk_len = 2;
        c.stage1.lambda_per = -1.0;
        match c.validate() {
            Err(Error::Validation(v)) => assert!(v.len() >= 3, "{v:?}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn hash_ignores_key_order() {
        let a =
            ExperimentConfig::from_toml_str("seed = 3\n[model]\nchannels = 32\nmotion_dim = 16\n")
                .unwrap();
        let b = ExperimentConfig::from_toml_str(
            "[model]\nmotion_dim = 16\nchannels = 32\n[stage1]\n\n[data]\n",
        )
        .unwrap();
        let mut b = b;
        b.seed = 3;
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.model.channels = 33;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[model]\nchanels = 3\n").is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
    }
}
