//! Latent pose encoding and flow synthesis.
//!
//! An image is compressed into a [`MotionFeature`] by a strided convolutional
//! encoder. A small perceptron maps the feature to a coarse grid of
//! rotation/translation pairs ([`TransformParams`]), which
//! [`decode_flow`] expands into a dense [`FlowField`] at feature resolution.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{he_std, Bound, Conv, Dense, ParamStore};
use crate::tensor::Tensor;

/// Compact latent pose vector of length K.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFeature(pub Vec<f64>);

impl MotionFeature {
    pub fn zeros(k: usize) -> Self {
        MotionFeature(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-cell rigid motion on a coarse `rows × cols` grid: an angle (radians,
/// about the feature-grid center) and a translation in feature pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    /// `[3, rows, cols]`: angle, tx, ty.
    grid: Tensor,
}

impl TransformParams {
    pub fn new(grid: Tensor) -> Result<Self> {
        if grid.shape().len() != 3 || grid.dim(0) != 3 {
            return Err(Error::Shape(format!(
                "transform grid must be [3, rows, cols], got {:?}",
                grid.shape()
            )));
        }
        if !grid.all_finite() {
            return Err(Error::Numeric("non-finite transform parameters".into()));
        }
        Ok(TransformParams { grid })
    }

    pub fn identity(rows: usize, cols: usize) -> Self {
        TransformParams {
            grid: Tensor::zeros(&[3, rows, cols]),
        }
    }

    /// Same rotation and translation in every cell.
    pub fn uniform(rows: usize, cols: usize, angle: f64, t: [f64; 2]) -> Self {
        let n = rows * cols;
        let mut data = vec![angle; n];
        data.extend(std::iter::repeat_n(t[0], n));
        data.extend(std::iter::repeat_n(t[1], n));
        TransformParams {
            grid: Tensor::from_vec(&[3, rows, cols], data).expect("grid shape"),
        }
    }

    pub fn rows(&self) -> usize {
        self.grid.dim(1)
    }

    pub fn cols(&self) -> usize {
        self.grid.dim(2)
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    fn at(&self, ch: usize, i: usize, j: usize) -> f64 {
        self.grid.data()[(ch * self.rows() + i) * self.cols() + j]
    }

    pub fn angle(&self, i: usize, j: usize) -> f64 {
        self.at(0, i, j)
    }

    pub fn translation(&self, i: usize, j: usize) -> [f64; 2] {
        [self.at(1, i, j), self.at(2, i, j)]
    }

    /// Row-major 2×2 rotation matrix of cell `(i, j)`.
    pub fn rotation(&self, i: usize, j: usize) -> [[f64; 2]; 2] {
        let (s, c) = self.angle(i, j).sin_cos();
        [[c, -s], [s, c]]
    }
}

/// Dense displacement field `[2, h, w]` (dx, dy) in feature pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 || data.dim(0) != 2 {
            return Err(Error::Shape(format!(
                "flow must be [2, h, w], got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::Numeric("non-finite flow".into()));
        }
        Ok(FlowField { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            data: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn displacement(&self, y: usize, x: usize) -> [f64; 2] {
        let hw = self.height() * self.width();
        let p = y * self.width() + x;
        [self.data.data()[p], self.data.data()[hw + p]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn max_magnitude(&self) -> f64 {
        let hw = self.height() * self.width();
        (0..hw)
            .map(|p| self.data.data()[p].hypot(self.data.data()[hw + p]))
            .fold(0.0, f64::max)
    }
}

/// Latent pose encoder: pixel-unshuffle, three 3×3 convolutions (two of them
/// stride 2) and a linear read-out of the flattened map.
#[derive(Clone, Debug)]
pub struct PoseEncoder {
    patch: usize,
    convs: [Conv; 3],
    out: Dense,
    slope: f64,
}

impl PoseEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let patch = cfg.patch();
        let e = cfg.encoder_width;
        let cin = 3 * patch * patch;
        let slope = cfg.c_lambda;
        let convs = [
            Conv::new(
                store,
                "lpe.conv0",
                cin,
                e,
                (3, 3),
                1,
                he_std(cin * 9, slope),
                rng,
            ),
            Conv::new(
                store,
                "lpe.conv1",
                e,
                e,
                (3, 3),
                2,
                he_std(e * 9, slope),
                rng,
            ),
            Conv::new(
                store,
                "lpe.conv2",
                e,
                e,
                (3, 3),
                2,
                he_std(e * 9, slope),
                rng,
            ),
        ];
        let flat = e * (cfg.feature_height / 4) * (cfg.feature_width / 4);
        let out = Dense::new(
            store,
            "lpe.out",
            flat,
            cfg.motion_dim,
            (1.0 / flat as f64).sqrt(),
            rng,
        );
        PoseEncoder {
            patch,
            convs,
            out,
            slope,
        }
    }

    /// `[n, 3, H, W] -> [n, K]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Var {
        let mut h = g.space_to_depth(image, self.patch);
        for conv in &self.convs {
            h = conv.forward(g, p, h);
            h = g.leaky(h, self.slope);
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
        self.out.forward(g, p, flat)
    }
}

/// Nonlinear pose transformation: motion feature to coarse rigid-motion grid.
/// The output layer starts at zero so an untrained model predicts the
/// identity warp.
#[derive(Clone, Debug)]
pub struct PoseTransform {
    hidden: Dense,
    head: Dense,
    grid: usize,
    slope: f64,
}

impl PoseTransform {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let hidden = Dense::new(
            store,
            "pose.hidden",
            cfg.motion_dim,
            cfg.pose_hidden,
            he_std(cfg.motion_dim, cfg.c_lambda),
            rng,
        );
        let g = cfg.coarse_grid;
        let head = Dense::new(store, "pose.head", cfg.pose_hidden, 3 * g * g, 0.0, rng);
        PoseTransform {
            hidden,
            head,
            grid: g,
            slope: cfg.c_lambda,
        }
    }

    pub fn head(&self) -> Dense {
        self.head
    }

    /// `[n, K] -> [n, 3, g, g]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, mf: Var) -> Var {
        let n = g.shape(mf)[0];
        let h = self.hidden.forward(g, p, mf);
        let h = g.leaky(h, self.slope);
        let out = self.head.forward(g, p, h);
        g.reshape(out, &[n, 3, self.grid, self.grid])
    }
}

/// Motion decoder: bilinear expansion of the coarse grid to `(h, w)` followed
/// by the per-pixel rigid motion about the grid center.
pub fn flow_from_params(g: &mut Graph, params: Var, h: usize, w: usize) -> Var {
    let dense = g.resize(params, h, w);
    g.affine_flow(dense)
}

/// Dense flow for one parameter grid at feature resolution `h × w`.
pub fn decode_flow(params: &TransformParams, h: usize, w: usize) -> FlowField {
    let mut g = Graph::new();
    let grid = params
        .grid
        .clone()
        .reshape(&[1, 3, params.rows(), params.cols()])
        .expect("grid");
    let p = g.constant(grid);
    let f = flow_from_params(&mut g, p, h, w);
    FlowField {
        data: g.value(f).clone().reshape(&[2, h, w]).expect("flow"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_params_give_exactly_zero_flow() {
        let f = decode_flow(&TransformParams::identity(4, 4), 16, 16);
        assert!(f.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_translation_is_uniform() {
        let f = decode_flow(&TransformParams::uniform(4, 4, 0.0, [0.5, 0.0]), 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(f.displacement(y, x), [0.5, 0.0]);
            }
        }
    }

    #[test]
    fn half_turn_reflects_through_center() {
        // Brute force: apply the affine map per cell and compare endpoints.
        let params = TransformParams::uniform(4, 4, std::f64::consts::PI, [0.0, 0.0]);
        let f = decode_flow(&params, 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let [dx, dy] = f.displacement(i, j);
                let (tx, ty) = (j as f64 + dx, i as f64 + dy);
                assert!((tx - (3 - j) as f64).abs() < 1e-12, "x target at ({i},{j})");
                assert!((ty - (3 - i) as f64).abs() < 1e-12, "y target at ({i},{j})");
            }
        }
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let grid = Tensor::randn(&[3, 4, 4], 3.0, &mut rng);
        let p = TransformParams::new(grid).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let r = p.rotation(i, j);
                let rrt = [
                    r[0][0] * r[0][0] + r[0][1] * r[0][1],
                    r[0][0] * r[1][0] + r[0][1] * r[1][1],
                    r[1][0] * r[1][0] + r[1][1] * r[1][1],
                ];
                assert!(
                    (rrt[0] - 1.0).abs() < 1e-12
                        && rrt[1].abs() < 1e-12
                        && (rrt[2] - 1.0).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let grid = Tensor::from_vec(&[3, 1, 1], vec![f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(TransformParams::new(grid), Err(Error::Numeric(_))));
    }

    use rand::SeedableRng;
}
