//! Feature warping and deviation-gated decoding.
//!
//! The [`Generator`] bundles every stage-1 network: the pose encoder and
//! transform from [`crate::motion_latent`], the source feature extractor with
//! its enhancement branch, the deviation gate `δ = L·σ(w·F'_W + b)`, the
//! refiner `U` and the pixel head. Decoding mixes
//! `z = δ·F'_W + (1 − δ)·U(F'_W)` at feature resolution and upsamples once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{self, Graph, Var};
use crate::checkpoint::Container;
use crate::config::{GateMode, ModelConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::motion_latent::{
    flow_from_params, FlowField, MotionFeature, PoseEncoder, PoseTransform, TransformParams,
};
use crate::nn::{he_std, Bound, Conv, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `C × H_f × W_f` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "feature map must be [c, h, w], got {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("non-finite feature map".into()));
        }
        Ok(FeatureMap(t))
    }

    pub fn channels(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-element deviation values strictly inside `(0, cap)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationMap {
    values: Tensor,
    cap: f64,
}

impl DeviationMap {
    pub fn new(values: Tensor, cap: f64) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "deviation map must be [c, h, w], got {:?}",
                values.shape()
            )));
        }
        if !(cap.is_finite() && cap > 0.0) {
            return Err(Error::Contract(format!(
                "deviation cap must be positive, got {cap}"
            )));
        }
        if let Some(v) = values.data().iter().find(|&&v| !(v > 0.0 && v < cap)) {
            return Err(Error::Contract(format!(
                "deviation value {v} outside (0, {cap})"
            )));
        }
        Ok(DeviationMap { values, cap })
    }

    /// The same value everywhere.
    pub fn constant(c: usize, h: usize, w: usize, value: f64, cap: f64) -> Result<Self> {
        Self::new(Tensor::full(&[c, h, w], value), cap)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Channel mean divided by the cap, `[h, w]` row-major in `[0, 1]`.
    pub fn mean_map(&self) -> Vec<f64> {
        let (c, h, w) = (self.values.dim(0), self.values.dim(1), self.values.dim(2));
        let mut out = vec![0.0; h * w];
        for ch in self.values.data().chunks(h * w) {
            out.iter_mut().zip(ch).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= c as f64 * self.cap);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationParams {
    pub c_lambda: f64,
}

impl ActivationParams {
    pub fn new(c_lambda: f64) -> Result<Self> {
        if !(c_lambda.is_finite() && c_lambda >= 0.0) {
            return Err(Error::Contract(format!(
                "c_lambda must be finite and >= 0, got {c_lambda}"
            )));
        }
        Ok(ActivationParams { c_lambda })
    }
}

/// `x` for `x >= 0`, `c_lambda · x` below zero.
pub fn activate(x: &Tensor, params: ActivationParams) -> Tensor {
    x.map(|v| autograd::leaky(v, params.c_lambda))
}

/// Bilinear backward warp with border clamping: output at `p` samples the
/// input at `p + flow(p)`.
pub fn warp(features: &FeatureMap, flow: &FlowField) -> Result<FeatureMap> {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    if flow.height() != h || flow.width() != w {
        return Err(Error::Contract(format!(
            "flow is {}x{}, features are {h}x{w}",
            flow.height(),
            flow.width()
        )));
    }
    let out = crate::kernels::warp_forward(features.0.data(), flow.tensor().data(), 1, c, h, w);
    FeatureMap::new(Tensor::from_vec(&[c, h, w], out)?)
}

/// Keeps the gate strictly inside `(0, L)` where `σ` rounds to 0 or 1. A
/// power of two, so `σ = 1/2` maps to exactly `L/2`.
pub const GATE_MARGIN: f64 = 1.0 / (1u64 << 40) as f64;

fn squeeze(s: f64) -> f64 {
    GATE_MARGIN + (1.0 - 2.0 * GATE_MARGIN) * s
}

/// `cap · σ(w[c]·x + b[c])` with per-channel `w`, `b`, squeezed by
/// [`GATE_MARGIN`] at both ends.
pub fn deviation_with(x: &FeatureMap, w: &[f64], b: &[f64], cap: f64) -> Tensor {
    let hw = x.height() * x.width();
    let mut out = x.0.data().to_vec();
    for (ch, plane) in out.chunks_mut(hw).enumerate() {
        plane
            .iter_mut()
            .for_each(|v| *v = cap * squeeze(autograd::sigmoid(w[ch] * *v + b[ch])));
    }
    Tensor::from_vec(x.0.shape(), out).expect("deviation shape")
}

/// `δ·f + (1 − δ)·u` per element.
pub fn interpolate(f: &FeatureMap, u: &FeatureMap, delta: &DeviationMap) -> Result<FeatureMap> {
    if f.0.shape() != u.0.shape() || f.0.shape() != delta.values.shape() {
        return Err(Error::Contract(format!(
            "interpolation shapes differ: {:?} / {:?} / {:?}",
            f.0.shape(),
            u.0.shape(),
            delta.values.shape()
        )));
    }
    let data =
        f.0.data()
            .iter()
            .zip(u.0.data())
            .zip(delta.values.data())
            .map(|((&fv, &uv), &d)| d * fv + (1.0 - d) * uv)
            .collect();
    FeatureMap::new(Tensor::from_vec(f.0.shape(), data)?)
}

const HEAD_GAIN: f64 = 4.0;

/// Sets the first `n` output channels of `conv` to `gain·x_i + bias` at
/// the kernel centre, with no other taps.
fn seed_identity(store: &mut ParamStore, conv: &Conv, n: usize, gain: f64, bias: f64) {
    let w = store.get_mut(conv.w);
    let (cin, kh, kw) = (w.dim(1), w.dim(2), w.dim(3));
    let data = w.data_mut();
    for o in 0..n {
        data[o * cin * kh * kw..(o + 1) * cin * kh * kw].fill(0.0);
        data[((o * cin + o) * kh + kh / 2) * kw + kw / 2] = gain;
    }
    store.get_mut(conv.b).data_mut()[..n].fill(bias);
}

/// Tape handles produced by one generator forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Reconstructed images `[n, 3, H, W]` in `(0, 1)`.
    pub recon: Var,
    /// `[n, 3, g, g]` transform grid.
    pub params: Var,
    /// `[n, 2, H_f, W_f]`.
    pub flow: Var,
    /// Warped enhanced features `F'_W`.
    pub warped: Var,
    /// Deviation map, absent in the direct-warp ablation.
    pub delta: Option<Var>,
}

/// All stage-1 networks and their parameters.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: PoseEncoder,
    pose: PoseTransform,
    feat: Conv,
    enh_feat: Conv,
    enh_gate: Conv,
    gate_w: ParamId,
    gate_b: ParamId,
    refiner: [Conv; 2],
    head: Conv,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = PoseEncoder::new(&mut store, cfg, &mut rng);
        let pose = PoseTransform::new(&mut store, cfg, &mut rng);
        let r = cfg.patch();
        let (cin, c, s) = (3 * r * r, cfg.channels, cfg.c_lambda);
        let feat = Conv::new(
            &mut store,
            "dec.feat",
            cin,
            c,
            (3, 3),
            1,
            he_std(cin * 9, s),
            &mut rng,
        );
        let enh_feat = Conv::new(
            &mut store,
            "dec.enh_feat",
            c,
            c,
            (3, 3),
            1,
            he_std(c * 9, s),
            &mut rng,
        );
        let enh_gate = Conv::new(
            &mut store,
            "dec.enh_gate",
            c,
            c,
            (1, 1),
            1,
            0.5 * he_std(c, s),
            &mut rng,
        );
        let gate_w = store.add("dec.gate.w", Tensor::full(&[c], 1.0));
        let gate_b = store.add("dec.gate.b", Tensor::zeros(&[c]));
        let refiner = [
            Conv::new(
                &mut store,
                "dec.refine0",
                c,
                c,
                (3, 3),
                1,
                0.5 * he_std(c * 9, s),
                &mut rng,
            ),
            Conv::new(
                &mut store,
                "dec.refine1",
                c,
                c,
                (3, 3),
                1,
                0.5 * he_std(c * 9, s),
                &mut rng,
            ),
        ];
        let head = Conv::new(
            &mut store,
            "dec.head",
            c,
            cin,
            (3, 3),
            1,
            he_std(c * 9, 1.0),
            &mut rng,
        );
        // Pixel channels start on an identity path through the feature
        // extractor, the enhancement branch and the head.
        let carry = cin.min(c);
        seed_identity(&mut store, &feat, carry, 1.0, 0.0);
        if cfg.enhance {
            seed_identity(&mut store, &enh_feat, carry, 1.0, 0.0);
            seed_identity(&mut store, &enh_gate, carry, 0.0, 0.0);
        }
        for conv in &refiner {
            seed_identity(&mut store, conv, carry, 0.0, 0.0);
        }
        seed_identity(&mut store, &head, carry, HEAD_GAIN, -0.5 * HEAD_GAIN);
        Generator {
            cfg: cfg.clone(),
            store,
            encoder,
            pose,
            feat,
            enh_feat,
            enh_gate,
            gate_w,
            gate_b,
            refiner,
            head,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn pose_head(&self) -> crate::nn::Dense {
        self.pose.head()
    }

    pub fn gate_params(&self) -> (&[f64], &[f64]) {
        (
            self.store.get(self.gate_w).data(),
            self.store.get(self.gate_b).data(),
        )
    }

    pub fn set_gate_params(&mut self, w: &[f64], b: &[f64]) -> Result<()> {
        let c = self.cfg.channels;
        if w.len() != c || b.len() != c {
            return Err(Error::Shape(format!("gate parameters need {c} channels")));
        }
        self.store
            .get_mut(self.gate_w)
            .data_mut()
            .copy_from_slice(w);
        self.store
            .get_mut(self.gate_b)
            .data_mut()
            .copy_from_slice(b);
        Ok(())
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if img.height() != self.cfg.image_height || img.width() != self.cfg.image_width {
            return Err(Error::Shape(format!(
                "image is {}x{}, model is configured for {}x{}",
                img.height(),
                img.width(),
                self.cfg.image_height,
                self.cfg.image_width
            )));
        }
        Ok(())
    }

    /// Stacks images into an `[n, 3, H, W]` constant.
    pub fn batch(&self, g: &mut Graph, images: &[&Image]) -> Result<Var> {
        for img in images {
            self.check_image(img)?;
        }
        let tensors: Vec<Tensor> = images.iter().map(|i| i.tensor().clone()).collect();
        Ok(g.constant(Tensor::stack(&tensors)?))
    }

    /// `[n, 3, H, W] -> [n, K]`.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, images: Var) -> Var {
        self.encoder.forward(g, p, images)
    }

    /// Base features `F` and enhanced features `F'`.
    pub fn features_graph(&self, g: &mut Graph, p: &Bound, source: Var) -> (Var, Var) {
        let s = self.cfg.c_lambda;
        let x = g.space_to_depth(source, self.cfg.patch());
        let f = self.feat.forward(g, p, x);
        let f = g.leaky(f, s);
        if !self.cfg.enhance {
            return (f, f);
        }
        let a = self.enh_feat.forward(g, p, f);
        let a = g.leaky(a, s);
        let m = self.enh_gate.forward(g, p, f);
        let m = g.sigmoid(m);
        let m = g.scale(m, 2.0);
        (f, g.mul(a, m))
    }

    pub fn deviation_graph(&self, g: &mut Graph, p: &Bound, warped: Var) -> Var {
        let x = g.channel_affine(warped, p[self.gate_w], p[self.gate_b]);
        let x = g.sigmoid(x);
        let x = g.scale(x, 1.0 - 2.0 * GATE_MARGIN);
        let x = g.add_scalar(x, GATE_MARGIN);
        g.scale(x, self.cfg.deviation_cap)
    }

    pub fn refine_graph(&self, g: &mut Graph, p: &Bound, f: Var) -> Var {
        let mut x = f;
        for conv in &self.refiner {
            let a = g.leaky(x, self.cfg.c_lambda);
            let d = conv.forward(g, p, a);
            x = g.add(x, d);
        }
        x
    }

    /// `δ·f + (1 − δ)·U(f)`.
    pub fn mix_graph(&self, g: &mut Graph, p: &Bound, f: Var, delta: Var) -> Var {
        let u = self.refine_graph(g, p, f);
        let keep = g.mul(delta, f);
        let neg = g.scale(delta, -1.0);
        let rest = g.add_scalar(neg, 1.0);
        let refined = g.mul(rest, u);
        g.add(keep, refined)
    }

    /// Feature map `z` to pixels in `(0, 1)`.
    pub fn head_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Var {
        let a = g.leaky(z, self.cfg.c_lambda);
        let x = self.head.forward(g, p, a);
        let x = g.depth_to_space(x, self.cfg.patch());
        g.sigmoid(x)
    }

    /// Animates `source` with motion features `mf: [n, K]`.
    pub fn animate_graph(&self, g: &mut Graph, p: &Bound, source: Var, mf: Var) -> Forward {
        let (hf, wf) = (self.cfg.feature_height, self.cfg.feature_width);
        let params = self.pose.forward(g, p, mf);
        let flow = flow_from_params(g, params, hf, wf);
        let (_, enhanced) = self.features_graph(g, p, source);
        let warped = g.warp(enhanced, flow);
        let (z, delta) = match self.cfg.gate {
            GateMode::Deviation => {
                let delta = self.deviation_graph(g, p, warped);
                (self.mix_graph(g, p, warped, delta), Some(delta))
            }
            GateMode::DirectWarp => (warped, None),
        };
        let recon = self.head_graph(g, p, z);
        Forward {
            recon,
            params,
            flow,
            warped,
            delta,
        }
    }

    /// Encodes `driving` and animates `source` with it.
    pub fn reconstruct_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        source: Var,
        driving: Var,
    ) -> Forward {
        let mf = self.encode_graph(g, p, driving);
        self.animate_graph(g, p, source, mf)
    }

    fn run<T>(&self, f: impl FnOnce(&mut Graph, &Bound) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        f(&mut g, &p)
    }

    pub fn encode_pose(&self, image: &Image) -> Result<MotionFeature> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<MotionFeature>> {
        self.run(|g, p| {
            let x = self.batch(g, images)?;
            let mf = self.encode_graph(g, p, x);
            let k = self.cfg.motion_dim;
            Ok(g.value(mf)
                .data()
                .chunks(k)
                .map(|c| MotionFeature(c.to_vec()))
                .collect())
        })
    }

    fn mf_const(&self, g: &mut Graph, mfs: &[&MotionFeature]) -> Result<Var> {
        let k = self.cfg.motion_dim;
        let mut data = Vec::with_capacity(mfs.len() * k);
        for mf in mfs {
            if mf.len() != k {
                return Err(Error::Shape(format!(
                    "motion feature has length {}, expected {k}",
                    mf.len()
                )));
            }
            if mf.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite motion feature".into()));
            }
            data.extend_from_slice(&mf.0);
        }
        Ok(g.constant(Tensor::from_vec(&[mfs.len(), k], data)?))
    }

    pub fn pose_transform(&self, mf: &MotionFeature) -> Result<TransformParams> {
        self.run(|g, p| {
            let x = self.mf_const(g, &[mf])?;
            let params = self.pose.forward(g, p, x);
            let gs = self.cfg.coarse_grid;
            TransformParams::new(g.value(params).clone().reshape(&[3, gs, gs])?)
        })
    }

    /// `(F, F')` for one source image.
    pub fn enhance(&self, source: &Image) -> Result<(FeatureMap, FeatureMap)> {
        self.run(|g, p| {
            let x = self.batch(g, &[source])?;
            let (f, e) = self.features_graph(g, p, x);
            let unbatch = |v: Var| FeatureMap::new(g.value(v).index0(0));
            Ok((unbatch(f)?, unbatch(e)?))
        })
    }

    pub fn deviation(&self, warped: &FeatureMap) -> Result<DeviationMap> {
        let (w, b) = self.gate_params();
        DeviationMap::new(
            deviation_with(warped, w, b, self.cfg.deviation_cap),
            self.cfg.deviation_cap,
        )
    }

    /// Refiner output `U(f)`.
    pub fn refine(&self, f: &FeatureMap) -> Result<FeatureMap> {
        self.run(|g, p| {
            let x = g.constant(
                f.0.clone()
                    .reshape(&[1, f.channels(), f.height(), f.width()])?,
            );
            let u = self.refine_graph(g, p, x);
            FeatureMap::new(g.value(u).index0(0))
        })
    }

    /// Interpolated features `z = δ·f + (1 − δ)·U(f)`.
    pub fn mix(&self, f: &FeatureMap, delta: &DeviationMap) -> Result<FeatureMap> {
        interpolate(f, &self.refine(f)?, delta)
    }

    /// Decodes `z` to an image.
    pub fn decode_features(&self, z: &FeatureMap) -> Result<Image> {
        self.run(|g, p| {
            let x = g.constant(
                z.0.clone()
                    .reshape(&[1, z.channels(), z.height(), z.width()])?,
            );
            let img = self.head_graph(g, p, x);
            Image::from_clamped(g.value(img).index0(0))
        })
    }

    /// Gated interpolation of `f` followed by the pixel head.
    pub fn decode(&self, f: &FeatureMap, delta: &DeviationMap) -> Result<Image> {
        if (delta.cap - self.cfg.deviation_cap).abs() > 0.0 {
            return Err(Error::Contract(format!(
                "deviation cap {} differs from configured {}",
                delta.cap, self.cfg.deviation_cap
            )));
        }
        self.decode_features(&self.mix(f, delta)?)
    }

    pub fn reconstruct(&self, source: &Image, driving: &Image) -> Result<Image> {
        let mf = self.encode_pose(driving)?;
        Ok(self.animate(source, &[mf])?.remove(0).0)
    }

    /// One frame per motion feature, each with its deviation map (if the
    /// gate is enabled).
    pub fn animate(
        &self,
        source: &Image,
        mfs: &[MotionFeature],
    ) -> Result<Vec<(Image, Option<DeviationMap>)>> {
        if mfs.is_empty() {
            return Ok(Vec::new());
        }
        self.run(|g, p| {
            let refs: Vec<&Image> = vec![source; mfs.len()];
            let src = self.batch(g, &refs)?;
            let mf_refs: Vec<&MotionFeature> = mfs.iter().collect();
            let mf = self.mf_const(g, &mf_refs)?;
            let out = self.animate_graph(g, p, src, mf);
            (0..mfs.len())
                .map(|i| {
                    let img = Image::from_clamped(g.value(out.recon).index0(i))?;
                    let delta = out.delta.map(|d| DeviationMap {
                        values: g.value(d).index0(i),
                        cap: self.cfg.deviation_cap,
                    });
                    Ok((img, delta))
                })
                .collect()
        })
    }

    /// Flow for one motion feature.
    pub fn flow(&self, mf: &MotionFeature) -> Result<FlowField> {
        let params = self.pose_transform(mf)?;
        Ok(crate::motion_latent::decode_flow(
            &params,
            self.cfg.feature_height,
            self.cfg.feature_width,
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

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            feature_height: 4,
            feature_width: 4,
            motion_dim: 4,
            channels: 6,
            coarse_grid: 2,
            encoder_width: 4,
            pose_hidden: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn activation_reductions() {
        let x = Tensor::from_vec(&[4], vec![-5.0, -0.5, 0.0, 3.0]).unwrap();
        assert_eq!(
            activate(&x, ActivationParams::new(0.0).unwrap()).data(),
            &[0.0, 0.0, 0.0, 3.0]
        );
        assert_eq!(activate(&x, ActivationParams::new(1.0).unwrap()), x);
        assert_eq!(
            activate(&x, ActivationParams::new(0.2).unwrap()).data()[0],
            -1.0
        );
        assert!(ActivationParams::new(-0.1).is_err());
    }

    #[test]
    fn deviation_map_rejects_out_of_range() {
        assert!(DeviationMap::constant(1, 2, 2, 1.0, 1.0).is_err());
        assert!(DeviationMap::constant(1, 2, 2, 0.0, 1.0).is_err());
        assert!(DeviationMap::constant(1, 2, 2, 0.5, 1.0).is_ok());
    }

    #[test]
    fn untrained_model_reconstructs_without_warp() {
        let cfg = small();
        let gen = Generator::new(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = Image::from_clamped(Tensor::randn(&[3, 16, 16], 0.3, &mut rng).map(|v| v + 0.5))
            .unwrap();
        let drv = Image::from_clamped(Tensor::randn(&[3, 16, 16], 0.3, &mut rng).map(|v| v + 0.5))
            .unwrap();
        let recon = gen.reconstruct(&src, &drv).unwrap();
        let (_, enhanced) = gen.enhance(&src).unwrap();
        let delta = gen.deviation(&enhanced).unwrap();
        assert_eq!(recon, gen.decode(&enhanced, &delta).unwrap());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let gen = Generator::new(&small(), 1);
        let img = Image::filled(8, 8, [0.5; 3]);
        assert!(matches!(gen.encode_pose(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let gen = Generator::new(&small(), 3);
        let (f, e) = gen.enhance(&Image::filled(16, 16, [0.0; 3])).unwrap();
        assert_eq!(f.tensor().shape(), e.tensor().shape());
        assert!(f.tensor().all_finite() && e.tensor().all_finite());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let a = Generator::new(&small(), 4);
        let mut b = Generator::new(&small(), 5);
        let mut c = Container::new();
        a.save_into(&mut c, "g.");
        b.load_from(&c, "g.").unwrap();
        assert_eq!(a.params(), b.params());
    }
}
