//! Training, inference and evaluation orchestration.

mod eval;
mod infer;
mod stage1;
mod stage2;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::synthetic_data::{generate_dataset, read_dataset, write_clip, ClipRecord, SceneSpec};
use crate::tensor::Tensor;

pub use eval::{
    evaluate, evaluate_clips, write_report, ClipMetrics, EvalReport, FgdEncoder, REPORT_COLUMNS,
};
pub use infer::{infer, infer_dataset, write_generated_clip, InferOutput};
pub use stage1::{
    load_generator, reconstruction_psnr, train_stage1, Stage1Options, Stage1Outcome, Stage1Row,
    Stage1Trainer, STAGE1_CHECKPOINT, STAGE1_LOG,
};
pub use stage2::{
    encode_clips, load_stage2, train_stage2, MotionNorm, Stage2Model, Stage2Options, Stage2Outcome,
    Stage2Row, Stage2Trainer, STAGE2_CHECKPOINT, STAGE2_LOG,
};

/// Provenance record written when a command starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    pub provenance: String,
    /// Seconds since the Unix epoch; the only nondeterministic field.
    pub started_at: u64,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Scene generator matching the configured image size and frame rate.
pub fn scene_spec(cfg: &ExperimentConfig) -> SceneSpec {
    SceneSpec {
        height: cfg.model.image_height,
        width: cfg.model.image_width,
        fps: cfg.data.fps,
        ..SceneSpec::default()
    }
}

/// Writes `cfg.data.clips` synthetic clips under `out`.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let clips = generate_dataset(
        &scene_spec(cfg),
        cfg.data.clips,
        cfg.data.duration_s,
        cfg.seed,
    )?;
    clips
        .iter()
        .map(|c| {
            let dir = out.join(&c.id);
            write_clip(c, &dir)?;
            Ok(dir)
        })
        .collect()
}

/// Reads every clip under `root`; an empty directory is a data error.
pub fn load_clips(root: &Path) -> Result<Vec<ClipRecord>> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "data directory {} does not exist",
            root.display()
        )));
    }
    let clips = read_dataset(root)?;
    if clips.is_empty() {
        return Err(Error::Data(format!(
            "no clips (directories with manifest.txt) under {}",
            root.display()
        )));
    }
    Ok(clips)
}

impl RunManifest {
    pub fn new(
        command: &str,
        cfg: &ExperimentConfig,
        checkpoints: Vec<PathBuf>,
        metrics_log: Option<PathBuf>,
    ) -> Self {
        let hash = cfg.hash();
        RunManifest {
            command: command.to_string(),
            provenance: format!(
                "gesturegen {} {command} config:{} seed:{}",
                env!("CARGO_PKG_VERSION"),
                &hash[..12],
                cfg.seed
            ),
            config_hash: hash,
            seed: cfg.seed,
            checkpoints,
            metrics_log,
            started_at: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    /// Writes `run_manifest.json` in `dir` via temp file and rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST);
        let tmp = dir.join(format!("{RUN_MANIFEST}.tmp"));
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Cosine decay from `lr` at step 0 to `lr·min_ratio` at `total`.
pub fn cosine_lr(lr: f64, min_ratio: f64, step: usize, total: usize) -> f64 {
    let x = (step as f64 / total.max(1) as f64).min(1.0);
    lr * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()))
}

pub(crate) fn save_adam(c: &mut Container, prefix: &str, opt: &Adam) {
    let (m, v, step) = opt.state();
    for (i, (mt, vt)) in m.iter().zip(v).enumerate() {
        c.insert(format!("{prefix}.m.{i}"), mt.clone());
        c.insert(format!("{prefix}.v.{i}"), vt.clone());
    }
    c.insert_scalar(format!("{prefix}.step"), step as f64);
}

pub(crate) fn load_adam(c: &Container, prefix: &str, store: &ParamStore, lr: f64) -> Result<Adam> {
    let mut opt = Adam::new(store, lr);
    let get = |name: String| -> Result<Tensor> {
        c.get(&name)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks optimizer tensor {name}")))
    };
    let m = (0..store.len())
        .map(|i| get(format!("{prefix}.m.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let v = (0..store.len())
        .map(|i| get(format!("{prefix}.v.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let step = c
        .scalar(&format!("{prefix}.step"))
        .ok_or_else(|| Error::Contract(format!("checkpoint lacks {prefix}.step")))?;
    opt.restore(m, v, step as u64)?;
    Ok(opt)
}

/// Writes `meta.*` scalars describing the model shape.
pub(crate) fn save_model_meta(c: &mut Container, cfg: &ExperimentConfig) {
    let m = &cfg.model;
    for (k, v) in [
        ("image_height", m.image_height),
        ("image_width", m.image_width),
        ("feature_height", m.feature_height),
        ("feature_width", m.feature_width),
        ("motion_dim", m.motion_dim),
        ("channels", m.channels),
        ("coarse_grid", m.coarse_grid),
    ] {
        c.insert_scalar(format!("meta.{k}"), v as f64);
    }
}

pub(crate) fn check_model_meta(c: &Container, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let m = &cfg.model;
    for (k, v) in [
        ("image_height", m.image_height),
        ("image_width", m.image_width),
        ("feature_height", m.feature_height),
        ("feature_width", m.feature_width),
        ("motion_dim", m.motion_dim),
        ("channels", m.channels),
        ("coarse_grid", m.coarse_grid),
    ] {
        match c.scalar(&format!("meta.{k}")) {
            Some(s) if s as usize == v => {}
            other => {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("model.{k} is {v} in the config but {other:?} in the checkpoint"),
                })
            }
        }
    }
    Ok(())
}

/// Appends CSV lines to a log, creating it with `header` if needed.
pub(crate) struct CsvLog {
    path: PathBuf,
    buf: String,
}

impl CsvLog {
    /// Opens `path`, keeping only rows with step < `keep_below` when
    /// resuming so the log mirrors an uninterrupted run.
    pub fn open(path: &Path, header: &str, keep_below: Option<usize>) -> Result<Self> {
        let mut buf = format!("{header}\n");
        if let Some(limit) = keep_below {
            if let Ok(old) = fs::read_to_string(path) {
                for line in old.lines().skip(1) {
                    let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
                    if step.is_some_and(|s| s < limit) {
                        buf.push_str(line);
                        buf.push('\n');
                    }
                }
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
        Ok(CsvLog {
            path: path.to_path_buf(),
            buf: String::new(),
        })
    }

    pub fn row(&mut self, line: String) {
        self.buf.push_str(&line);
        self.buf.push('\n');
    }

    pub fn flush(&mut self) -> Result<()> {
        use std::io::Write;
        if self.buf.is_empty() {
            return Ok(());
        }
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(self.buf.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.buf.clear();
        Ok(())
    }
}
