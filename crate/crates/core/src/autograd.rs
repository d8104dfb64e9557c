//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op as it is applied; [`Graph::backward`] walks the
//! tape in reverse. Graphs are built per forward pass and dropped afterwards.

use crate::kernels::{self, ConvGeom, Window};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Leaky(Var, f64),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelAffine {
        x: Var,
        w: Var,
        b: Var,
    },
    AddBroadcast {
        x: Var,
        v: Var,
    },
    Warp {
        feat: Var,
        flow: Var,
    },
    AffineFlow {
        params: Var,
    },
    CropResize {
        x: Var,
        windows: Vec<Window>,
    },
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    AvgPool2(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// `x` for `x >= 0`, `slope · x` otherwise.
    pub fn leaky(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| leaky(x, slope));
        let ng = self.needs(a);
        self.push(v, Op::Leaky(a, slope), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Mean absolute difference, the L1 reconstruction distance.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.square(d);
        self.mean(d)
    }

    /// 2-D convolution; `x: [n, cin, h, w]`, `w: [cout, cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(
            xs[1], ws[1],
            "conv2d channel mismatch: input {xs:?}, weight {ws:?}"
        );
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            ph: pad.0,
            pw: pad.1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs[0],
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let v = Tensor::from_vec(&[xs[0], geom.cout, geom.out_h(), geom.out_w()], out)
            .expect("conv shape");
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(v, Op::Conv { x, w, b, geom }, ng)
    }

    /// `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, din) = (self.shape(x)[0], self.shape(x)[1]);
        let dout = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], din, "linear input width mismatch");
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let v = Tensor::from_vec(&[n, dout], out).expect("linear shape");
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Linear { x, w, b }, ng)
    }

    /// Per-channel `w[c] · x + b[c]` for `x: [n, c, ...]`.
    pub fn channel_affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, inner) = split3(&xs, 1);
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let s = &mut out[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                s.iter_mut().for_each(|v| *v = wv[ch] * *v + bv[ch]);
            }
        }
        let v = Tensor::from_vec(&xs, out).expect("affine shape");
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::ChannelAffine { x, w, b }, ng)
    }

    /// Adds `v: [n, c]` to every position of `x: [n, c, ...]`.
    pub fn add_broadcast(&mut self, x: Var, v: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, inner) = split3(&xs, 1);
        assert_eq!(self.shape(v), &[n, c], "broadcast operand must be [n, c]");
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let add = vv[i * c + ch];
                out[(i * c + ch) * inner..(i * c + ch + 1) * inner]
                    .iter_mut()
                    .for_each(|o| *o += add);
            }
        }
        let t = Tensor::from_vec(&xs, out).expect("broadcast shape");
        let ng = self.needs(x) || self.needs(v);
        self.push(t, Op::AddBroadcast { x, v }, ng)
    }

    /// Bilinear backward warp with border clamping; `flow: [n, 2, h, w]`.
    pub fn warp(&mut self, feat: Var, flow: Var) -> Var {
        let fs = self.shape(feat).to_vec();
        let ws = self.shape(flow);
        assert_eq!(
            ws,
            &[fs[0], 2, fs[2], fs[3]],
            "warp: flow must be [n, 2, h, w] matching features"
        );
        let out = kernels::warp_forward(
            self.value(feat).data(),
            self.value(flow).data(),
            fs[0],
            fs[1],
            fs[2],
            fs[3],
        );
        let v = Tensor::from_vec(&fs, out).expect("warp shape");
        let ng = self.needs(feat) || self.needs(flow);
        self.push(v, Op::Warp { feat, flow }, ng)
    }

    /// Dense displacement from per-pixel (angle, tx, ty) maps `[n, 3, h, w]`:
    /// each pixel is rotated about the grid center and translated.
    pub fn affine_flow(&mut self, params: Var) -> Var {
        let s = self.shape(params).to_vec();
        assert_eq!(s[1], 3, "affine_flow expects (angle, tx, ty) channels");
        let (n, h, w) = (s[0], s[2], s[3]);
        let hw = h * w;
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let p = self.value(params).data();
        let mut out = vec![0.0; n * 2 * hw];
        for i in 0..n {
            for q in 0..hw {
                let (rx, ry) = ((q % w) as f64 - cx, (q / w) as f64 - cy);
                let th = p[i * 3 * hw + q];
                let (sn, cs) = th.sin_cos();
                let cm1 = cos_minus_one(th, cs);
                out[i * 2 * hw + q] = cm1 * rx - sn * ry + p[(i * 3 + 1) * hw + q];
                out[(i * 2 + 1) * hw + q] = sn * rx + cm1 * ry + p[(i * 3 + 2) * hw + q];
            }
        }
        let v = Tensor::from_vec(&[n, 2, h, w], out).expect("flow shape");
        let ng = self.needs(params);
        self.push(v, Op::AffineFlow { params }, ng)
    }

    /// Bilinear crop-and-resize with one window per batch item.
    pub fn crop_resize(&mut self, x: Var, windows: &[Window], oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(windows.len(), s[0], "one crop window per batch item");
        for win in windows {
            assert!(
                win.x0 < win.x1 && win.y0 < win.y1 && win.x1 <= s[3] && win.y1 <= s[2],
                "crop window {win:?} outside {s:?}"
            );
        }
        let out = kernels::crop_resize_forward(
            self.value(x).data(),
            s[0],
            s[1],
            s[2],
            s[3],
            windows,
            oh,
            ow,
        );
        let v = Tensor::from_vec(&[s[0], s[1], oh, ow], out).expect("crop shape");
        let ng = self.needs(x);
        self.push(
            v,
            Op::CropResize {
                x,
                windows: windows.to_vec(),
            },
            ng,
        )
    }

    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        let windows = vec![Window::full(s[2], s[3]); s[0]];
        self.crop_resize(x, &windows, oh, ow)
    }

    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            s[2].is_multiple_of(r) && s[3].is_multiple_of(r),
            "space_to_depth: {s:?} not divisible by {r}"
        );
        let out = kernels::space_to_depth(self.value(x).data(), s[0], s[1], s[2], s[3], r);
        let v = Tensor::from_vec(&[s[0], s[1] * r * r, s[2] / r, s[3] / r], out).expect("s2d");
        let ng = self.needs(x);
        self.push(v, Op::SpaceToDepth(x, r), ng)
    }

    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            s[1].is_multiple_of(r * r),
            "depth_to_space: {} channels not divisible by {}",
            s[1],
            r * r
        );
        let (c, h, w) = (s[1] / (r * r), s[2] * r, s[3] * r);
        let out = kernels::depth_to_space(self.value(x).data(), s[0], c, h, w, r);
        let v = Tensor::from_vec(&[s[0], c, h, w], out).expect("d2s");
        let ng = self.needs(x);
        self.push(v, Op::DepthToSpace(x, r), ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let out = kernels::avg_pool2(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let v = Tensor::from_vec(&[s[0], s[1], s[2] / 2, s[3] / 2], out).expect("pool");
        let ng = self.needs(x);
        self.push(v, Op::AvgPool2(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape");
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Concatenates along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s[0] == n && s[2..] == first[2..], "concat shape mismatch");
            total_c += s[1];
        }
        let mut out = Vec::with_capacity(n * total_c * inner);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[i * c * inner..(i + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let v = Tensor::from_vec(&shape, out).expect("concat");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::Concat(parts.to_vec()), ng)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (outer, alen, inner) = split3(&s, axis);
        assert!(start + len <= alen, "slice out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(
                &src[(o * alen + start) * inner..(o * alen + start + len) * inner],
            );
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let v = Tensor::from_vec(&shape, out).expect("slice");
        let ng = self.needs(x);
        self.push(v, Op::Slice { x, axis, start }, ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, t: Tensor| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                send(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |gy, y| gy * y * (1.0 - y))),
            Op::Leaky(a, slope) => send(
                *a,
                g.zip_map(
                    self.value(*a),
                    |gy, x| if x >= 0.0 { gy } else { gy * slope },
                ),
            ),
            Op::Square(a) => send(*a, g.zip_map(self.value(*a), |gy, x| 2.0 * x * gy)),
            Op::Abs(a) => send(*a, g.zip_map(self.value(*a), |gy, x| gy * sign(x))),
            Op::Sum(a) => send(*a, Tensor::full(self.shape(*a), g.data()[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, Tensor::full(self.shape(*a), g.data()[0] / n));
            }
            Op::Conv { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let r = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    self.value(*w).data(),
                    geom,
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = r.dx {
                    send(*x, Tensor::from_vec(self.shape(*x), dx).expect("dx"));
                }
                if let Some(dw) = r.dw {
                    send(*w, Tensor::from_vec(self.shape(*w), dw).expect("dw"));
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    send(*b, Tensor::from_vec(self.shape(*b), db).expect("db"));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(
                        n,
                        dout,
                        din,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        0.0,
                        &mut dx,
                    );
                    send(*x, Tensor::from_vec(&[n, din], dx).expect("dx"));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(
                        dout,
                        n,
                        din,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        0.0,
                        &mut dw,
                    );
                    send(*w, Tensor::from_vec(&[dout, din], dw).expect("dw"));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    send(*b, Tensor::from_vec(&[dout], db).expect("db"));
                }
            }
            Op::ChannelAffine { x, w, b } => {
                let xs = self.shape(*x);
                let (n, c, inner) = split3(xs, 1);
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let gd = g.data();
                if self.needs(*x) {
                    let mut dx = gd.to_vec();
                    for i in 0..n {
                        for ch in 0..c {
                            dx[(i * c + ch) * inner..(i * c + ch + 1) * inner]
                                .iter_mut()
                                .for_each(|d| *d *= wv[ch]);
                        }
                    }
                    send(*x, Tensor::from_vec(xs, dx).expect("dx"));
                }
                let mut dw = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * inner..(i * c + ch + 1) * inner;
                        for (gv, xv) in gd[r.clone()].iter().zip(&xv[r]) {
                            dw[ch] += gv * xv;
                            db[ch] += gv;
                        }
                    }
                }
                send(*w, Tensor::from_vec(&[c], dw).expect("dw"));
                send(*b, Tensor::from_vec(&[c], db).expect("db"));
            }
            Op::AddBroadcast { x, v } => {
                send(*x, g.clone());
                let xs = self.shape(*x);
                let (n, c, inner) = split3(xs, 1);
                let dv: Vec<f64> = (0..n * c)
                    .map(|p| g.data()[p * inner..(p + 1) * inner].iter().sum())
                    .collect();
                send(*v, Tensor::from_vec(&[n, c], dv).expect("dv"));
            }
            Op::Warp { feat, flow } => {
                let s = self.shape(*feat);
                let (df, dfl) = kernels::warp_backward(
                    self.value(*feat).data(),
                    self.value(*flow).data(),
                    g.data(),
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                );
                send(*feat, Tensor::from_vec(s, df).expect("dfeat"));
                send(
                    *flow,
                    Tensor::from_vec(self.shape(*flow), dfl).expect("dflow"),
                );
            }
            Op::AffineFlow { params } => {
                let s = self.shape(*params);
                let (n, h, w) = (s[0], s[2], s[3]);
                let hw = h * w;
                let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
                let p = self.value(*params).data();
                let gd = g.data();
                let mut dp = vec![0.0; n * 3 * hw];
                for i in 0..n {
                    for q in 0..hw {
                        let (rx, ry) = ((q % w) as f64 - cx, (q / w) as f64 - cy);
                        let (sn, cs) = p[i * 3 * hw + q].sin_cos();
                        let (gx, gy) = (gd[i * 2 * hw + q], gd[(i * 2 + 1) * hw + q]);
                        dp[i * 3 * hw + q] = gx * (-sn * rx - cs * ry) + gy * (cs * rx - sn * ry);
                        dp[(i * 3 + 1) * hw + q] = gx;
                        dp[(i * 3 + 2) * hw + q] = gy;
                    }
                }
                send(*params, Tensor::from_vec(s, dp).expect("dparams"));
            }
            Op::CropResize { x, windows } => {
                let s = self.shape(*x);
                let os = g.shape();
                let dx = kernels::crop_resize_backward(
                    g.data(),
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                    windows,
                    os[2],
                    os[3],
                );
                send(*x, Tensor::from_vec(s, dx).expect("dcrop"));
            }
            Op::SpaceToDepth(x, r) => {
                let s = self.shape(*x);
                let dx = kernels::depth_to_space(g.data(), s[0], s[1], s[2], s[3], *r);
                send(*x, Tensor::from_vec(s, dx).expect("ds2d"));
            }
            Op::DepthToSpace(x, r) => {
                let os = g.shape();
                let dx = kernels::space_to_depth(g.data(), os[0], os[1], os[2], os[3], *r);
                send(*x, Tensor::from_vec(self.shape(*x), dx).expect("dd2s"));
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let dx = kernels::avg_pool2_backward(g.data(), s[0] * s[1], s[2], s[3]);
                send(*x, Tensor::from_vec(s, dx).expect("dpool"));
            }
            Op::Reshape(x) => {
                send(*x, g.clone().reshape(self.shape(*x)).expect("dreshape"));
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let total_c = g.shape()[1];
                let inner: usize = g.shape()[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut d = Vec::with_capacity(n * c * inner);
                    for i in 0..n {
                        let base = (i * total_c + offset) * inner;
                        d.extend_from_slice(&g.data()[base..base + c * inner]);
                    }
                    offset += c;
                    send(p, Tensor::from_vec(self.shape(p), d).expect("dconcat"));
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, alen, inner) = split3(s, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, Tensor::from_vec(s, dx).expect("dslice"));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `cos θ − 1` without cancellation for small angles; exactly 0 at θ = 0.
fn cos_minus_one(theta: f64, cos: f64) -> f64 {
    if theta.abs() < 0.5 {
        let s = (0.5 * theta).sin();
        -2.0 * s * s
    } else {
        cos - 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(out · probe))/d(input) for a unary graph builder.
    fn check_unary(input: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let y = build(&mut g, x);
        let probe = Tensor::randn(g.shape(y), 1.0, &mut rng);
        let p = g.constant(probe.clone());
        let prod = g.mul(y, p);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();

        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(t);
            let y = build(&mut g, x);
            g.value(y)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "grad mismatch at {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv_gradients() {
        let w = rand_tensor(&[4, 3, 3, 3], 1);
        check_unary(rand_tensor(&[2, 3, 5, 6], 2), move |g, x| {
            let w = g.constant(w.clone());
            g.conv2d(x, w, None, 2, (1, 1))
        });
        let x = rand_tensor(&[2, 3, 5, 6], 3);
        check_unary(rand_tensor(&[4, 3, 3, 1], 4), move |g, w| {
            let x = g.constant(x.clone());
            g.conv2d(x, w, None, 1, (1, 0))
        });
    }

    #[test]
    fn warp_gradients_wrt_both_arguments() {
        let flow = rand_tensor(&[2, 2, 5, 5], 5).map(|v| 0.7 * v + 0.3);
        check_unary(rand_tensor(&[2, 3, 5, 5], 6), {
            let flow = flow.clone();
            move |g, x| {
                let f = g.constant(flow.clone());
                g.warp(x, f)
            }
        });
        let feat = rand_tensor(&[2, 3, 5, 5], 7);
        check_unary(flow, move |g, f| {
            let x = g.constant(feat.clone());
            g.warp(x, f)
        });
    }

    #[test]
    fn resampling_and_layout_gradients() {
        check_unary(rand_tensor(&[2, 3, 4, 4], 8), |g, x| g.resize(x, 8, 6));
        check_unary(rand_tensor(&[1, 2, 8, 8], 9), |g, x| g.space_to_depth(x, 2));
        check_unary(rand_tensor(&[1, 8, 2, 2], 10), |g, x| {
            g.depth_to_space(x, 2)
        });
        check_unary(rand_tensor(&[1, 2, 4, 6], 11), |g, x| g.avg_pool2(x));
        check_unary(rand_tensor(&[2, 3, 4, 4], 12), |g, x| g.affine_flow(x));
        check_unary(rand_tensor(&[2, 5, 3, 1], 13), |g, x| {
            let a = g.slice(x, 2, 1, 2);
            let b = g.slice(x, 2, 0, 2);
            let d = g.sub(a, b);
            g.concat(&[d, a])
        });
    }

    #[test]
    fn dense_and_elementwise_gradients() {
        let w = rand_tensor(&[3, 4], 14);
        let b = rand_tensor(&[3], 15);
        check_unary(rand_tensor(&[2, 4], 16), move |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.linear(x, w, b);
            let y = g.sigmoid(y);
            g.leaky(y, 0.2)
        });
        let cw = rand_tensor(&[3], 17);
        let cb = rand_tensor(&[3], 18);
        check_unary(rand_tensor(&[2, 3, 2, 2], 19), move |g, x| {
            let w = g.constant(cw.clone());
            let b = g.constant(cb.clone());
            let y = g.channel_affine(x, w, b);
            let s = g.square(y);
            g.scale(s, 0.5)
        });
        let v = rand_tensor(&[2, 3], 20);
        check_unary(rand_tensor(&[2, 3, 2, 2], 21), move |g, x| {
            let v = g.constant(v.clone());
            g.add_broadcast(x, v)
        });
    }

    #[test]
    fn identity_flow_is_exactly_zero() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let f = g.affine_flow(p);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }
}
