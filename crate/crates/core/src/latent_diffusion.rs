//! Conditional denoising diffusion over motion-feature sequences.
//!
//! The denoiser predicts the clean sequence `x̂0` from a noised one. A chunk
//! of `M` frames is laid out as a `[K, M, 1]` map so temporal convolutions run
//! along the frame axis. Conditioning combines per-frame audio (concatenated
//! to the input) with the source feature, the four preceding features and a
//! timestep embedding (projected and added to every frame).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Container;
use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::nn::{he_std, Bound, Conv, Dense, ParamStore};
use crate::tensor::Tensor;

/// Number of preceding frames a chunk is conditioned on.
pub const PRIOR_FRAMES: usize = 4;
const TIME_FREQS: usize = 8;

/// `M × K` sequence of motion features, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    m: usize,
    k: usize,
    data: Vec<f64>,
}

impl MotionSequence {
    pub fn new(m: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != m * k {
            return Err(Error::Shape(format!(
                "sequence data has {} values, expected {m}x{k}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite motion sequence".into()));
        }
        Ok(MotionSequence { m, k, data })
    }

    pub fn zeros(m: usize, k: usize) -> Self {
        MotionSequence {
            m,
            k,
            data: vec![0.0; m * k],
        }
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let k = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != k) {
            return Err(Error::Shape("frames differ in length".into()));
        }
        Self::new(frames.len(), k, frames.concat())
    }

    pub fn standard_normal<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Self {
        let data = (0..m * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        MotionSequence { m, k, data }
    }

    pub fn frames(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> MotionSequence {
        MotionSequence {
            m: len,
            k: self.k,
            data: self.data[start * self.k..(start + len) * self.k].to_vec(),
        }
    }

    /// Channel-major `[K, M]` copy, the denoiser's layout.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.k];
        for i in 0..self.m {
            for j in 0..self.k {
                out[j * self.m + i] = self.data[i * self.k + j];
            }
        }
        out
    }

    pub fn from_channels(m: usize, k: usize, ch: &[f64]) -> Self {
        let mut data = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                data[i * k + j] = ch[j * m + i];
            }
        }
        MotionSequence { m, k, data }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.m, self.k], self.data.clone()).expect("sequence shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "sequence tensor must be [M, K], got {:?}",
                t.shape()
            )));
        }
        Self::new(t.dim(0), t.dim(1), t.data().to_vec())
    }
}

/// Conditioning for one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    /// `M × A`, row-major by frame.
    pub audio: Vec<f64>,
    /// `4 × K` features of the preceding frames; all zero for the first chunk.
    pub prev4: Vec<f64>,
    /// `K` features of the source frame.
    pub source_mf: Vec<f64>,
}

impl Condition {
    pub fn check(&self, m: usize, a: usize, k: usize) -> Result<()> {
        if self.audio.len() != m * a
            || self.prev4.len() != PRIOR_FRAMES * k
            || self.source_mf.len() != k
        {
            return Err(Error::Shape(format!(
                "condition sizes audio {}, prev4 {}, source {} do not match M={m}, A={a}, K={k}",
                self.audio.len(),
                self.prev4.len(),
                self.source_mf.len()
            )));
        }
        let all = self.audio.iter().chain(&self.prev4).chain(&self.source_mf);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite condition".into()));
        }
        Ok(())
    }

    pub fn is_first_chunk(&self) -> bool {
        self.prev4.iter().all(|&v| v == 0.0)
    }
}

/// Linear beta schedule with cached products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Contract("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Contract("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Contract("betas must be non-decreasing".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Coefficients `(c0, ct, var)` of `q(x_{t−1} | x_t, x0)`: mean
    /// `c0·x0 + ct·x_t`, variance `var`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        (c0, ct, var)
    }
}

/// `√ᾱ·x0 + √(1 − ᾱ)·noise` for an explicit `ᾱ`.
pub fn q_sample_at(
    x0: &MotionSequence,
    alpha_bar: f64,
    noise: &MotionSequence,
) -> Result<MotionSequence> {
    if x0.m != noise.m || x0.k != noise.k {
        return Err(Error::Shape("noise shape differs from x0".into()));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data
        .iter()
        .zip(&noise.data)
        .map(|(x, n)| a * x + s * n)
        .collect();
    Ok(MotionSequence {
        m: x0.m,
        k: x0.k,
        data,
    })
}

pub fn q_sample(
    sched: &DiffusionSchedule,
    x0: &MotionSequence,
    t: usize,
    noise: &MotionSequence,
) -> Result<MotionSequence> {
    sched.check_t(t)?;
    q_sample_at(x0, sched.alpha_bar(t), noise)
}

/// Loss terms of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiffusionParts {
    pub mf: f64,
    pub vel: f64,
    pub acc: f64,
}

impl DiffusionParts {
    pub fn total(&self, lambda_vel: f64, lambda_acc: f64) -> f64 {
        self.mf + lambda_vel * self.vel + lambda_acc * self.acc
    }
}

fn diffs(x: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((m - 1) * k);
    for i in 1..m {
        for j in 0..k {
            out.push(x[i * k + j] - x[(i - 1) * k + j]);
        }
    }
    out
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// MSE of the sequence, its first and its second temporal differences.
pub fn sequence_loss(pred: &MotionSequence, target: &MotionSequence) -> Result<DiffusionParts> {
    if pred.m != target.m || pred.k != target.k {
        return Err(Error::Shape("prediction and target differ in shape".into()));
    }
    let (m, k) = (pred.m, pred.k);
    if m < 3 {
        return Err(Error::Contract(format!(
            "acceleration term needs at least 3 frames, got {m}"
        )));
    }
    let (vp, vt) = (diffs(&pred.data, m, k), diffs(&target.data, m, k));
    let (ap, at) = (diffs(&vp, m - 1, k), diffs(&vt, m - 1, k));
    Ok(DiffusionParts {
        mf: mse(&pred.data, &target.data),
        vel: mse(&vp, &vt),
        acc: mse(&ap, &at),
    })
}

/// Batched conditioning tensors for the tape.
#[derive(Clone, Debug)]
pub struct CondBatch {
    /// `[n, A, M, 1]`.
    pub audio: Tensor,
    /// `[n, 5K + 2·TIME_FREQS]`: source, prev4, timestep embedding.
    pub context: Tensor,
}

/// Sinusoidal embedding of `t / T`.
pub fn time_embedding(t: usize, steps: usize) -> Vec<f64> {
    let s = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(2 * TIME_FREQS);
    for i in 0..TIME_FREQS {
        let w = std::f64::consts::PI * 2f64.powi(i as i32) * s;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// Denoising network predicting the clean sequence.
#[derive(Clone, Debug)]
pub struct Denoiser {
    k: usize,
    cfg: DiffusionConfig,
    store: ParamStore,
    input: Conv,
    ctx_hidden: Dense,
    ctx_out: Dense,
    blocks: Vec<Conv>,
    output: Conv,
}

const SLOPE: f64 = 0.2;

impl Denoiser {
    pub fn new(k: usize, cfg: &DiffusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (a, h) = (cfg.audio_dim, cfg.hidden);
        let cin = k + a;
        let ctx_dim = (1 + PRIOR_FRAMES) * k + 2 * TIME_FREQS;
        let input = Conv::new(
            &mut store,
            "den.input",
            cin,
            h,
            (1, 1),
            1,
            he_std(cin, SLOPE),
            &mut rng,
        );
        let ctx_hidden = Dense::new(
            &mut store,
            "den.ctx0",
            ctx_dim,
            h,
            he_std(ctx_dim, SLOPE),
            &mut rng,
        );
        let ctx_out = Dense::new(&mut store, "den.ctx1", h, h, he_std(h, SLOPE), &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                Conv::new(
                    &mut store,
                    &format!("den.block{i}"),
                    h,
                    h,
                    (3, 1),
                    1,
                    0.5 * he_std(3 * h, SLOPE),
                    &mut rng,
                )
            })
            .collect();
        let output = Conv::new(
            &mut store,
            "den.output",
            h,
            k,
            (1, 1),
            1,
            he_std(h, 1.0),
            &mut rng,
        );
        Denoiser {
            k,
            cfg: cfg.clone(),
            store,
            input,
            ctx_hidden,
            ctx_out,
            blocks,
            output,
        }
    }

    pub fn motion_dim(&self) -> usize {
        self.k
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Packs conditions and timesteps for a batch.
    pub fn cond_batch(&self, conds: &[&Condition], ts: &[usize]) -> Result<CondBatch> {
        let (m, a, k) = (self.cfg.chunk_len, self.cfg.audio_dim, self.k);
        let n = conds.len();
        let mut audio = Vec::with_capacity(n * a * m);
        let mut ctx = Vec::with_capacity(n * ((1 + PRIOR_FRAMES) * k + 2 * TIME_FREQS));
        for (c, &t) in conds.iter().zip(ts) {
            c.check(m, a, k)?;
            for j in 0..a {
                audio.extend((0..m).map(|i| c.audio[i * a + j]));
            }
            ctx.extend_from_slice(&c.source_mf);
            ctx.extend_from_slice(&c.prev4);
            ctx.extend(time_embedding(t, self.cfg.steps));
        }
        let width = ctx.len() / n.max(1);
        Ok(CondBatch {
            audio: Tensor::from_vec(&[n, a, m, 1], audio)?,
            context: Tensor::from_vec(&[n, width], ctx)?,
        })
    }

    /// `x_t: [n, K, M, 1] -> x̂0: [n, K, M, 1]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_t: Var,
        audio: Var,
        context: Var,
    ) -> Var {
        let inp = g.concat(&[x_t, audio]);
        let mut h = self.input.forward(g, p, inp);
        let c = self.ctx_hidden.forward(g, p, context);
        let c = g.leaky(c, SLOPE);
        let c = self.ctx_out.forward(g, p, c);
        h = g.add_broadcast(h, c);
        for b in &self.blocks {
            let a = g.leaky(h, SLOPE);
            let d = b.forward(g, p, a);
            h = g.add(h, d);
        }
        let a = g.leaky(h, SLOPE);
        self.output.forward(g, p, a)
    }

    fn seq_tensor(&self, xs: &[&MotionSequence]) -> Result<Tensor> {
        let (m, k) = (self.cfg.chunk_len, self.k);
        let mut data = Vec::with_capacity(xs.len() * m * k);
        for x in xs {
            if x.m != m || x.k != k {
                return Err(Error::Shape(format!(
                    "sequence is {}x{}, expected {m}x{k}",
                    x.m, x.k
                )));
            }
            data.extend(x.to_channels());
        }
        Tensor::from_vec(&[xs.len(), k, m, 1], data)
    }

    /// `x̂0` for a batch of noised sequences.
    pub fn predict_x0_batch(
        &self,
        xs: &[&MotionSequence],
        ts: &[usize],
        conds: &[&Condition],
    ) -> Result<Vec<MotionSequence>> {
        let (m, k) = (self.cfg.chunk_len, self.k);
        let x = self.seq_tensor(xs)?;
        let cb = self.cond_batch(conds, ts)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let (x, a, c) = (g.constant(x), g.constant(cb.audio), g.constant(cb.context));
        let out = self.forward_graph(&mut g, &p, x, a, c);
        Ok(g.value(out)
            .data()
            .chunks(m * k)
            .map(|ch| MotionSequence::from_channels(m, k, ch))
            .collect())
    }

    pub fn predict_x0(
        &self,
        x_t: &MotionSequence,
        t: usize,
        cond: &Condition,
    ) -> Result<MotionSequence> {
        Ok(self.predict_x0_batch(&[x_t], &[t], &[cond])?.remove(0))
    }

    /// One reverse step `x_t -> x_{t−1}`; noise is drawn only for `t > 1`.
    pub fn denoise_step<R: Rng + ?Sized>(
        &self,
        sched: &DiffusionSchedule,
        x_t: &MotionSequence,
        t: usize,
        cond: &Condition,
        rng: &mut R,
    ) -> Result<MotionSequence> {
        sched.check_t(t)?;
        let x0 = self.predict_x0(x_t, t, cond)?;
        let (c0, ct, var) = sched.posterior(t);
        let sd = var.sqrt();
        let data = x0
            .data
            .iter()
            .zip(&x_t.data)
            .map(|(a, b)| {
                let mean = c0 * a + ct * b;
                if t > 1 {
                    mean + sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    mean
                }
            })
            .collect();
        MotionSequence::new(x_t.m, x_t.k, data)
    }

    /// Full reverse chain from standard normal noise, seeded.
    pub fn sample_chunk(
        &self,
        sched: &DiffusionSchedule,
        cond: &Condition,
        seed: u64,
    ) -> Result<MotionSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = MotionSequence::standard_normal(self.cfg.chunk_len, self.k, &mut rng);
        for t in (1..=sched.steps()).rev() {
            x = self.denoise_step(sched, &x, t, cond, &mut rng)?;
        }
        Ok(x)
    }

    /// Tape loss for a batch: returns `(total, mf, vel, acc)` nodes.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x0: &[&MotionSequence],
        conds: &[&Condition],
        ts: &[usize],
        noise: &[&MotionSequence],
        sched: &DiffusionSchedule,
    ) -> Result<(Var, Var, Var, Var)> {
        let m = self.cfg.chunk_len;
        if m < 3 {
            return Err(Error::Contract(format!(
                "acceleration term needs at least 3 frames, got {m}"
            )));
        }
        let noised: Vec<MotionSequence> = x0
            .iter()
            .zip(noise)
            .zip(ts)
            .map(|((x, n), &t)| q_sample(sched, x, t, n))
            .collect::<Result<_>>()?;
        let noised_refs: Vec<&MotionSequence> = noised.iter().collect();
        let xt = g.constant(self.seq_tensor(&noised_refs)?);
        let target = g.constant(self.seq_tensor(x0)?);
        let cb = self.cond_batch(conds, ts)?;
        let (a, c) = (g.constant(cb.audio), g.constant(cb.context));
        let pred = self.forward_graph(g, p, xt, a, c);
        let l_mf = g.mse(pred, target);
        let (vp, vt) = (temporal_diff(g, pred), temporal_diff(g, target));
        let l_vel = g.mse(vp, vt);
        let (ap, at) = (temporal_diff(g, vp), temporal_diff(g, vt));
        let l_acc = g.mse(ap, at);
        let v = g.scale(l_vel, self.cfg.lambda_vel);
        let ac = g.scale(l_acc, self.cfg.lambda_acc);
        let total = g.add(l_mf, v);
        let total = g.add(total, ac);
        Ok((total, l_mf, l_vel, l_acc))
    }

    /// Training loss for a single sequence: `(total, parts)`.
    pub fn diffusion_loss(
        &self,
        sched: &DiffusionSchedule,
        x0: &MotionSequence,
        cond: &Condition,
        t: usize,
        noise: &MotionSequence,
    ) -> Result<(f64, DiffusionParts)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let (total, mf, vel, acc) =
            self.loss_graph(&mut g, &p, &[x0], &[cond], &[t], &[noise], sched)?;
        let v = |x: Var| g.value(x).data()[0];
        Ok((
            v(total),
            DiffusionParts {
                mf: v(mf),
                vel: v(vel),
                acc: v(acc),
            },
        ))
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

/// First difference along the frame axis of `[n, K, M, 1]`.
fn temporal_diff(g: &mut Graph, x: Var) -> Var {
    let m = g.shape(x)[2];
    let hi = g.slice(x, 2, 1, m - 1);
    let lo = g.slice(x, 2, 0, m - 1);
    g.sub(hi, lo)
}
