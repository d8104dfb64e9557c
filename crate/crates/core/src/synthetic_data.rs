//! Procedural speaker clips with analytically known, beat-locked motion, and
//! the on-disk clip directory format.
//!
//! A clip directory holds
//!
//! ```text
//! manifest.txt      key=value lines (id, fps, frames, size, beat_times, ...)
//! frames/00000.png  one lossless RGB image per frame
//! audio.csv         frame index then one column per audio feature
//! regions.csv       frame index then hand and face boxes (x0,y0,x1,y1)
//! ```
//!
//! Audio features per frame are `[onset, beat, band0..band5]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::Window;
use crate::par;
use crate::seeding;
use crate::stage1_losses::RegionAnnotation;
use crate::tensor::Tensor;

pub const AUDIO_DIM: usize = 8;
pub const AUDIO_COLUMNS: [&str; AUDIO_DIM] = [
    "onset", "beat", "band0", "band1", "band2", "band3", "band4", "band5",
];
const MANIFEST_VERSION: u32 = 1;
const SUPERSAMPLE: usize = 3;

/// Figure, palette and motion program of the synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    /// Multiplies every figure dimension.
    pub scale: f64,
    pub torso_width: f64,
    pub background_seed: u64,
    pub background: [[f64; 3]; 2],
    pub shirt: [f64; 3],
    pub sleeve: [f64; 3],
    pub skin: [f64; 3],
    pub mouth: [f64; 3],
    /// Upper-arm swing (radians) at a beat.
    pub swing: f64,
    /// Extra elbow bend (radians) at a beat.
    pub bend: f64,
    /// Gaussian half-width of a gesture pulse, in seconds.
    pub pulse_width: f64,
    /// Range of gaps between consecutive beats, in seconds.
    pub beat_gap: (f64, f64),
    /// Beats stay at least this far from either clip end.
    pub edge_margin: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            fps: 10.0,
            scale: 1.0,
            torso_width: 22.0,
            background_seed: 11,
            background: [[0.78, 0.82, 0.9], [0.55, 0.6, 0.7]],
            shirt: [0.2, 0.33, 0.58],
            sleeve: [0.86, 0.45, 0.28],
            skin: [0.94, 0.76, 0.62],
            mouth: [0.42, 0.1, 0.12],
            swing: 0.3,
            bend: 0.2,
            pulse_width: 0.04,
            beat_gap: (0.4, 0.9),
            edge_margin: 0.3,
        }
    }
}

/// Ground-truth articulation of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    /// Right upper-arm angle from vertical, radians.
    pub right_shoulder: f64,
    /// Right elbow angle relative to the upper arm.
    pub right_elbow: f64,
    pub left_shoulder: f64,
    pub left_elbow: f64,
    /// Mouth opening in `[0, 1]`.
    pub mouth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub fps: f64,
    pub frames: Vec<Image>,
    /// One row of [`AUDIO_DIM`] features per frame.
    pub audio: Vec<Vec<f64>>,
    pub regions: Vec<RegionAnnotation>,
    pub beat_times: Vec<f64>,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.audio.len() != n || self.regions.len() != n {
            return Err(Error::Data(format!(
                "clip {}: {} frames, {} audio rows, {} region rows",
                self.id,
                n,
                self.audio.len(),
                self.regions.len()
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Data(format!(
                "clip {}: invalid fps {}",
                self.id, self.fps
            )));
        }
        if self.beat_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data(format!(
                "clip {}: beat times not sorted",
                self.id
            )));
        }
        let duration = n as f64 / self.fps;
        if self
            .beat_times
            .iter()
            .any(|&b| !(0.0..duration).contains(&b))
        {
            return Err(Error::Data(format!(
                "clip {}: beat outside the clip",
                self.id
            )));
        }
        Ok(())
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.first().map_or(0, Vec::len)
    }

    /// Beat frame indices.
    pub fn beat_frames(&self) -> Vec<usize> {
        self.beat_times
            .iter()
            .map(|b| (b * self.fps).round() as usize)
            .collect()
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.torso_width > 0.0 && self.scale.is_finite()) {
            return Err(Error::Contract(format!(
                "figure has zero area (scale {}, torso width {})",
                self.scale, self.torso_width
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Contract("image size must be positive".into()));
        }
        if !(self.fps > 0.0 && self.pulse_width > 0.0) {
            return Err(Error::Contract(
                "fps and pulse width must be positive".into(),
            ));
        }
        if !(self.beat_gap.0 > 0.0 && self.beat_gap.0 <= self.beat_gap.1) {
            return Err(Error::Contract(format!(
                "invalid beat gap range {:?}",
                self.beat_gap
            )));
        }
        Ok(())
    }

    /// Sum of Gaussian pulses centred on the beat frames, at frame `i`.
    fn pulse(&self, i: usize, beat_frames: &[usize]) -> f64 {
        let w = self.pulse_width * self.fps;
        beat_frames
            .iter()
            .map(|&b| {
                let d = i as f64 - b as f64;
                (-d * d / (2.0 * w * w)).exp()
            })
            .sum()
    }

    /// Articulation at frame `i`.
    pub fn pose(&self, i: usize, beat_frames: &[usize], mouth: f64) -> Pose {
        let p = self.pulse(i, beat_frames);
        Pose {
            right_shoulder: 0.35 + self.swing * p,
            right_elbow: 0.3 + self.bend * p,
            left_shoulder: 0.35 + 0.6 * self.swing * p,
            left_elbow: 0.3 + 0.6 * self.bend * p,
            mouth,
        }
    }

    fn geometry(&self, pose: &Pose) -> Geometry {
        let s = self.scale;
        let (w, h) = (self.width as f64, self.height as f64);
        let cx = w / 2.0;
        let k = w / 64.0 * s;
        let shoulder_y = h * 0.5;
        let half = self.torso_width * k / 2.0;
        let arm = |side: f64, sh: f64, el: f64| {
            let root = [cx + side * half, shoulder_y];
            let elbow = [
                root[0] + side * 13.0 * k * sh.sin(),
                root[1] + 13.0 * k * sh.cos(),
            ];
            let a = sh + el;
            let hand = [
                elbow[0] + side * 11.0 * k * a.sin(),
                elbow[1] + 11.0 * k * a.cos(),
            ];
            [root, elbow, hand]
        };
        Geometry {
            torso: [cx - half, shoulder_y - 2.0 * k, cx + half, h + 1.0],
            right: arm(1.0, pose.right_shoulder, pose.right_elbow),
            left: arm(-1.0, pose.left_shoulder, pose.left_elbow),
            head: [cx, shoulder_y - 14.0 * k],
            head_r: [7.0 * k, 9.0 * k],
            limb_r: 2.4 * k,
            hand_r: 3.0 * k,
            mouth: [cx, shoulder_y - 9.5 * k],
            mouth_r: [3.0 * k, (0.4 + 2.4 * pose.mouth) * k],
            eyes: [
                [cx - 3.0 * k, shoulder_y - 16.0 * k],
                [cx + 3.0 * k, shoulder_y - 16.0 * k],
            ],
            eye_r: 1.0 * k,
        }
    }

    fn background_at(&self, x: f64, y: f64, tex: &[(f64, f64, f64); 2]) -> [f64; 3] {
        let t = y / self.height as f64;
        let wave: f64 = tex
            .iter()
            .map(|(fx, fy, ph)| (fx * x + fy * y + ph).sin())
            .sum::<f64>()
            * 0.02;
        let [a, b] = self.background;
        [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t + wave)
    }

    fn texture(&self) -> [(f64, f64, f64); 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.background_seed);
        [0, 1].map(|_| {
            (
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.5),
                rng.random_range(0.0..6.3),
            )
        })
    }

    /// Renders one frame; the result is 8-bit quantized.
    pub fn render(&self, pose: &Pose) -> Image {
        let geo = self.geometry(pose);
        let tex = self.texture();
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; 3 * h * w];
        let n = SUPERSAMPLE as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / n;
                        let py = y as f64 + (sy as f64 + 0.5) / n;
                        let c = self.shade(px, py, &geo, &tex);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for (k, a) in acc.iter().enumerate() {
                    data[(k * h + y) * w + x] = a / (n * n);
                }
            }
        }
        Image::from_clamped(Tensor::from_vec(&[3, h, w], data).expect("frame shape"))
            .expect("clamped frame")
            .quantized()
    }

    fn shade(&self, x: f64, y: f64, g: &Geometry, tex: &[(f64, f64, f64); 2]) -> [f64; 3] {
        let p = [x, y];
        let in_ellipse = |c: [f64; 2], r: [f64; 2]| {
            let dx = (x - c[0]) / r[0];
            let dy = (y - c[1]) / r[1];
            dx * dx + dy * dy <= 1.0
        };
        let mut color = self.background_at(x, y, tex);
        let t = g.torso;
        if x >= t[0] && x <= t[2] && y >= t[1] && y <= t[3] {
            color = self.shirt;
        }
        for arm in [&g.left, &g.right] {
            if seg_dist(p, arm[0], arm[1]) <= g.limb_r || seg_dist(p, arm[1], arm[2]) <= g.limb_r {
                color = self.sleeve;
            }
            if dist(p, arm[2]) <= g.hand_r {
                color = self.skin;
            }
        }
        if in_ellipse(g.head, g.head_r) {
            color = self.skin;
            if g.eyes.iter().any(|&e| dist(p, e) <= g.eye_r) {
                color = [0.1, 0.1, 0.12];
            }
            if in_ellipse(g.mouth, g.mouth_r) {
                color = self.mouth;
            }
        }
        color
    }

    /// Hand box (right hand ±6 px) and face box (head ±9 px).
    pub fn regions(&self, pose: &Pose) -> RegionAnnotation {
        let g = self.geometry(pose);
        let k = self.width as f64 / 64.0 * self.scale;
        RegionAnnotation {
            hand: self.clamp_box(g.right[2], 6.0 * k),
            face: self.clamp_box(g.head, 9.0 * k),
        }
    }

    fn clamp_box(&self, c: [f64; 2], r: f64) -> Window {
        let clamp = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        let mut b = Window {
            x0: clamp(c[0] - r, self.width - 1),
            y0: clamp(c[1] - r, self.height - 1),
            x1: clamp(c[0] + r, self.width),
            y1: clamp(c[1] + r, self.height),
        };
        b.x1 = b.x1.max(b.x0 + 1);
        b.y1 = b.y1.max(b.y0 + 1);
        b
    }
}

struct Geometry {
    torso: [f64; 4],
    right: [[f64; 2]; 3],
    left: [[f64; 2]; 3],
    head: [f64; 2],
    head_r: [f64; 2],
    limb_r: f64,
    hand_r: f64,
    mouth: [f64; 2],
    mouth_r: [f64; 2],
    eyes: [[f64; 2]; 2],
    eye_r: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Random beat frames: gaps drawn from `spec.beat_gap`, kept away from the
/// clip ends.
fn random_beats<R: Rng>(spec: &SceneSpec, frames: usize, rng: &mut R) -> Vec<usize> {
    let duration = frames as f64 / spec.fps;
    let mut beats = Vec::new();
    let mut t = spec.edge_margin + rng.random_range(0.0..spec.beat_gap.0);
    while t <= duration - spec.edge_margin {
        let f = (t * spec.fps).round() as usize;
        if f < frames {
            beats.push(f);
        }
        t = f as f64 / spec.fps + rng.random_range(spec.beat_gap.0..=spec.beat_gap.1);
    }
    beats
}

/// Alternating voiced/unvoiced stretches, as a per-frame flag.
fn voicing<R: Rng>(frames: usize, fps: f64, rng: &mut R) -> Vec<bool> {
    let mut out = Vec::with_capacity(frames);
    let mut voiced = true;
    while out.len() < frames {
        let len = if voiced {
            rng.random_range(0.6..1.5)
        } else {
            rng.random_range(0.2..0.5)
        };
        let n = ((len * fps).round() as usize).max(1);
        out.extend(std::iter::repeat_n(voiced, n));
        voiced = !voiced;
    }
    out.truncate(frames);
    out
}

/// Generates a clip with random beats.
pub fn generate_clip(spec: &SceneSpec, duration_s: f64, seed: u64) -> Result<ClipRecord> {
    Ok(generate_with_truth(spec, duration_s, seed)?.0)
}

/// Generates a clip and returns the ground-truth pose per frame.
pub fn generate_with_truth(
    spec: &SceneSpec,
    duration_s: f64,
    seed: u64,
) -> Result<(ClipRecord, Vec<Pose>)> {
    spec.validate()?;
    let frames = frame_count(spec, duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beats = random_beats(spec, frames, &mut rng);
    build(spec, frames, &beats, &mut rng, format!("clip_{seed:016x}"))
}

/// Generates a clip with the given beat times, rounded to the frame grid.
pub fn generate_with_beats(
    spec: &SceneSpec,
    duration_s: f64,
    beat_times: &[f64],
    seed: u64,
) -> Result<(ClipRecord, Vec<Pose>)> {
    spec.validate()?;
    let frames = frame_count(spec, duration_s)?;
    let mut beats: Vec<usize> = Vec::with_capacity(beat_times.len());
    for &b in beat_times {
        let f = (b * spec.fps).round();
        if !(f >= 0.0 && (f as usize) < frames) {
            return Err(Error::Contract(format!(
                "beat at {b} s lies outside the clip"
            )));
        }
        beats.push(f as usize);
    }
    beats.sort_unstable();
    beats.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(spec, frames, &beats, &mut rng, format!("clip_{seed:016x}"))
}

fn frame_count(spec: &SceneSpec, duration_s: f64) -> Result<usize> {
    if !(duration_s >= 1.0 && duration_s.is_finite()) {
        return Err(Error::Contract(format!(
            "duration must be at least 1 s, got {duration_s}"
        )));
    }
    Ok((duration_s * spec.fps).round() as usize)
}

fn build(
    spec: &SceneSpec,
    frames: usize,
    beats: &[usize],
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<(ClipRecord, Vec<Pose>)> {
    let voiced = voicing(frames, spec.fps, rng);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let band_noise: Vec<[f64; 6]> = (0..frames)
        .map(|_| [0; 6].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let mouth: Vec<f64> = (0..frames)
        .map(|i| {
            if voiced[i] {
                let t = i as f64 / spec.fps;
                0.5 + 0.5 * (std::f64::consts::TAU * 3.3 * t + phase).sin()
            } else {
                0.0
            }
        })
        .collect();
    let poses: Vec<Pose> = (0..frames).map(|i| spec.pose(i, beats, mouth[i])).collect();
    let images = par::map_indexed(frames, |i| spec.render(&poses[i]));
    let regions = poses.iter().map(|p| spec.regions(p)).collect();
    let onset_w = 0.08 * spec.fps;
    let audio = (0..frames)
        .map(|i| {
            let onset = beats
                .iter()
                .map(|&b| {
                    let d = i as f64 - b as f64;
                    (-d * d / (2.0 * onset_w * onset_w)).exp()
                })
                .fold(0.0, f64::max);
            let beat = if beats.contains(&i) { 1.0 } else { 0.0 };
            let v = if voiced[i] { 1.0 } else { 0.0 };
            let mut row = vec![onset, beat];
            for (j, noise) in band_noise[i].iter().enumerate() {
                let wj = j as f64 / 5.0;
                let low = if j < 2 { 0.4 * onset } else { 0.0 };
                row.push(v * (wj * mouth[i] + (1.0 - wj) * 0.5) + low + 0.05 * noise);
            }
            row
        })
        .collect();
    let record = ClipRecord {
        id,
        fps: spec.fps,
        frames: images,
        audio,
        regions,
        beat_times: beats.iter().map(|&b| b as f64 / spec.fps).collect(),
    };
    Ok((record, poses))
}

/// `count` clips with seeds derived from `seed`, ids `clip_0000`, ...
pub fn generate_dataset(
    spec: &SceneSpec,
    count: usize,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<ClipRecord>> {
    (0..count)
        .map(|i| {
            let mut c = generate_clip(spec, duration_s, seeding::derive(seed, 0xc11b, i as u64))?;
            c.id = format!("clip_{i:04}");
            Ok(c)
        })
        .collect()
}

/// Writes `clip` into directory `dir` (created if needed).
pub fn write_clip(clip: &ClipRecord, dir: &Path) -> Result<()> {
    clip.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (i, f) in clip.frames.iter().enumerate() {
        f.save_png(&frames_dir.join(format!("{i:05}.png")))?;
    }
    let (h, w) = clip
        .frames
        .first()
        .map_or((0, 0), |f| (f.height(), f.width()));
    let beats: Vec<String> = clip.beat_times.iter().map(|b| format!("{b}")).collect();
    let manifest = format!(
        "version={MANIFEST_VERSION}\nid={}\nfps={}\nframes={}\nheight={h}\nwidth={w}\naudio_dim={}\nbeat_times={}\n",
        clip.id,
        clip.fps,
        clip.len(),
        clip.audio_dim(),
        beats.join(",")
    );
    write_text(&dir.join("manifest.txt"), &manifest)?;
    let mut audio = String::from("frame");
    for j in 0..clip.audio_dim() {
        audio.push(',');
        audio.push_str(AUDIO_COLUMNS.get(j).copied().unwrap_or("feature"));
    }
    audio.push('\n');
    for (i, row) in clip.audio.iter().enumerate() {
        audio.push_str(&i.to_string());
        for v in row {
            audio.push_str(&format!(",{v}"));
        }
        audio.push('\n');
    }
    write_text(&dir.join("audio.csv"), &audio)?;
    let mut regions =
        String::from("frame,hand_x0,hand_y0,hand_x1,hand_y1,face_x0,face_y0,face_x1,face_y1\n");
    for (i, r) in clip.regions.iter().enumerate() {
        let (a, b) = (r.hand, r.face);
        regions.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            a.x0, a.y0, a.x1, a.y1, b.x0, b.y0, b.x1, b.y1
        ));
    }
    write_text(&dir.join("regions.csv"), &regions)
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_text(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::parse(
            name,
            format!("{name} not found in {}", dir.display()),
        ));
    }
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

/// Splits CSV data rows after the header, checking the column count and
/// the leading frame index.
fn csv_rows(text: &str, file: &str, cols: usize) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    lines
        .next()
        .ok_or_else(|| Error::parse(file, "missing header"))?;
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if fields.len() != cols + 1 {
                return Err(Error::parse(
                    file,
                    format!(
                        "row {i}: expected {} fields, got {}",
                        cols + 1,
                        fields.len()
                    ),
                ));
            }
            if fields[0].parse::<usize>().ok() != Some(i) {
                return Err(Error::parse(
                    file,
                    format!("row {i}: frame index {} out of order", fields[0]),
                ));
            }
            Ok(fields[1..].to_vec())
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(s: &str, file: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(file, format!("cannot parse {what} from {s:?}")))
}

/// Reads a clip directory written by [`write_clip`]. Unknown entries are
/// ignored with a warning.
pub fn read_clip(dir: &Path) -> Result<ClipRecord> {
    if !dir.is_dir() {
        return Err(Error::parse(
            dir.display().to_string(),
            "clip directory not found",
        ));
    }
    let manifest = read_text(dir, "manifest.txt")?;
    let mut kv = BTreeMap::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse("manifest.txt", format!("line {line:?} is not key=value"))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::parse("manifest.txt", format!("missing key {k}")))
    };
    let version: u32 = parse_num(get("version")?, "manifest.txt", "version")?;
    if version != MANIFEST_VERSION {
        return Err(Error::parse(
            "manifest.txt",
            format!("unsupported version {version}"),
        ));
    }
    let id = get("id")?.to_string();
    let fps: f64 = parse_num(get("fps")?, "manifest.txt", "fps")?;
    let n: usize = parse_num(get("frames")?, "manifest.txt", "frames")?;
    let h: usize = parse_num(get("height")?, "manifest.txt", "height")?;
    let w: usize = parse_num(get("width")?, "manifest.txt", "width")?;
    let a: usize = parse_num(get("audio_dim")?, "manifest.txt", "audio_dim")?;
    let beats_s = get("beat_times")?;
    let beat_times = if beats_s.is_empty() {
        Vec::new()
    } else {
        beats_s
            .split(',')
            .map(|b| parse_num(b.trim(), "manifest.txt", "beat time"))
            .collect::<Result<Vec<f64>>>()?
    };

    let audio = csv_rows(&read_text(dir, "audio.csv")?, "audio.csv", a)?
        .into_iter()
        .map(|row| {
            row.iter()
                .map(|v| parse_num(v, "audio.csv", "feature"))
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let regions = csv_rows(&read_text(dir, "regions.csv")?, "regions.csv", 8)?
        .into_iter()
        .map(|row| {
            let v: Vec<usize> = row
                .iter()
                .map(|s| parse_num(s, "regions.csv", "box coordinate"))
                .collect::<Result<_>>()?;
            let r = RegionAnnotation {
                hand: Window {
                    x0: v[0],
                    y0: v[1],
                    x1: v[2],
                    y1: v[3],
                },
                face: Window {
                    x0: v[4],
                    y0: v[5],
                    x1: v[6],
                    y1: v[7],
                },
            };
            r.validate(h, w)
                .map_err(|e| Error::parse("regions.csv", e.to_string()))?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;

    let frames_dir = dir.join("frames");
    if !frames_dir.is_dir() {
        return Err(Error::parse("frames", "frames directory not found"));
    }
    let frames = par::map_indexed(n, |i| {
        let name = format!("frames/{i:05}.png");
        let path = dir.join(&name);
        if !path.is_file() {
            return Err(Error::parse(name, "frame not found"));
        }
        let img = Image::load_png(&path)?;
        if img.height() != h || img.width() != w {
            return Err(Error::parse(
                name,
                format!(
                    "frame is {}x{}, manifest says {h}x{w}",
                    img.height(),
                    img.width()
                ),
            ));
        }
        Ok(img)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    warn_unknown(dir, n)?;
    let clip = ClipRecord {
        id,
        fps,
        frames,
        audio,
        regions,
        beat_times,
    };
    clip.validate()?;
    Ok(clip)
}

fn warn_unknown(dir: &Path, n: usize) -> Result<()> {
    const KNOWN: [&str; 4] = ["manifest.txt", "audio.csv", "regions.csv", "frames"];
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if !KNOWN.contains(&name.as_str()) {
            log::warn!("{}: ignoring unknown entry {name}", dir.display());
        }
    }
    let frames_dir = dir.join("frames");
    for entry in fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&frames_dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        let expected = name
            .strip_suffix(".png")
            .and_then(|s| s.parse::<usize>().ok())
            .is_some_and(|i| i < n && name.len() == 9);
        if !expected {
            log::warn!(
                "{}: ignoring unknown frame entry {name}",
                frames_dir.display()
            );
        }
    }
    Ok(())
}

/// Lists clip directories (those containing `manifest.txt`) under `root`,
/// sorted by name.
pub fn list_clips(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("manifest.txt").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every clip under `root`.
pub fn read_dataset(root: &Path) -> Result<Vec<ClipRecord>> {
    list_clips(root)?.iter().map(|p| read_clip(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec = SceneSpec::default();
        let a = generate_clip(&spec, 4.0, 9).unwrap();
        assert_eq!(
            (a.frames.len(), a.audio.len(), a.regions.len()),
            (40, 40, 40)
        );
        assert_eq!(a, generate_clip(&spec, 4.0, 9).unwrap());
        assert_ne!(
            a.beat_times,
            generate_clip(&spec, 4.0, 10).unwrap().beat_times
        );
    }

    #[test]
    fn arm_peaks_at_given_beats() {
        let spec = SceneSpec::default();
        let (_, poses) = generate_with_beats(&spec, 2.0, &[0.5, 1.0, 1.5], 0).unwrap();
        let a: Vec<f64> = poses.iter().map(|p| p.right_shoulder).collect();
        let maxima: Vec<usize> = (1..a.len() - 1)
            .filter(|&i| a[i] > a[i - 1] && a[i] > a[i + 1])
            .collect();
        assert_eq!(maxima, vec![5, 10, 15]);
    }

    #[test]
    fn zero_area_figure_is_rejected() {
        let spec = SceneSpec {
            scale: 0.0,
            ..SceneSpec::default()
        };
        assert!(matches!(
            generate_clip(&spec, 2.0, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn beats_respect_margins() {
        let spec = SceneSpec::default();
        for seed in 0..20 {
            let c = generate_clip(&spec, 4.0, seed).unwrap();
            assert!(!c.beat_times.is_empty());
            for b in &c.beat_times {
                assert!(*b >= 0.25 && *b <= 3.75, "beat {b}");
            }
            for w in c.beat_times.windows(2) {
                assert!(w[1] - w[0] >= 0.35);
            }
        }
    }
}
