//! Raw NCHW kernels behind the autograd ops.
//!
//! Every kernel is parallel over the batch axis and accumulates per-sample
//! partial results in a fixed order, so outputs are bit-identical for any
//! thread count.

use crate::par;

/// `c = a · b + beta · c` for row-major operands, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are checked in debug builds; `c` is a unique borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncol = ho * wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncol = ho * wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `w` is `[cout, cin, kh, kw]`, `x` is `[n, cin, h, w]`.
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.col_cols();
    let mut out = vec![0.0; n * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |i, o| {
        let xi = &x[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.cout, g.cin, g.col_cols(), w, false, xi, false, 0.0, o);
        } else {
            let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
            im2col(xi, g, &mut cols);
            gemm(
                g.cout,
                g.col_rows(),
                g.col_cols(),
                w,
                false,
                &cols,
                false,
                0.0,
                o,
            );
        }
        if let Some(b) = bias {
            let hw = g.col_cols();
            for (co, bv) in b.iter().enumerate() {
                o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

/// Backward convolution for the gradients requested by the flags.
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    g: &ConvGeom,
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let in_len = g.cin * g.h * g.w;
    let hw = g.col_cols();
    let out_len = g.cout * hw;
    let wlen = g.cout * g.col_rows();

    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = par::map_indexed(n, |i| {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let di = &dout[i * out_len..(i + 1) * out_len];
        let pointwise = g.is_pointwise();
        let dw = need_dw.then(|| {
            let mut dw = vec![0.0; wlen];
            if pointwise {
                gemm(g.cout, hw, g.cin, di, false, xi, true, 0.0, &mut dw);
            } else {
                let mut cols = vec![0.0; g.col_rows() * hw];
                im2col(xi, g, &mut cols);
                gemm(
                    g.cout,
                    hw,
                    g.col_rows(),
                    di,
                    false,
                    &cols,
                    true,
                    0.0,
                    &mut dw,
                );
            }
            dw
        });
        let dx = need_dx.then(|| {
            let mut dxi = vec![0.0; in_len];
            if pointwise {
                gemm(g.cin, g.cout, hw, w, true, di, false, 0.0, &mut dxi);
            } else {
                let mut dcols = vec![0.0; g.col_rows() * hw];
                gemm(
                    g.col_rows(),
                    g.cout,
                    hw,
                    w,
                    true,
                    di,
                    false,
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, g, &mut dxi);
            }
            dxi
        });
        (dx, dw)
    });

    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * in_len));
    let mut dw_sum = need_dw.then(|| vec![0.0; wlen]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(sum), Some(dw)) = (dw_sum.as_mut(), dw) {
            sum.iter_mut().zip(&dw).for_each(|(s, d)| *s += d);
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![0.0; g.cout];
        for i in 0..n {
            for (co, acc) in db.iter_mut().enumerate() {
                let base = i * out_len + co * hw;
                *acc += dout[base..base + hw].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads {
        dx: dx_all,
        dw: dw_sum,
        db,
    }
}

/// Sampling tap for one bilinear lookup with border clamping.
#[derive(Clone, Copy, Debug)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    /// Derivative of the clamped coordinate w.r.t. the raw one (0 or 1).
    gx: f64,
    gy: f64,
}

fn tap(sx: f64, sy: f64, w: usize, h: usize) -> Tap {
    let maxx = (w - 1) as f64;
    let maxy = (h - 1) as f64;
    let (cx, gx) = if sx < 0.0 {
        (0.0, 0.0)
    } else if sx > maxx {
        (maxx, 0.0)
    } else {
        (sx, 1.0)
    };
    let (cy, gy) = if sy < 0.0 {
        (0.0, 0.0)
    } else if sy > maxy {
        (maxy, 0.0)
    } else {
        (sy, 1.0)
    };
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        wx: cx - x0 as f64,
        wy: cy - y0 as f64,
        gx,
        gy,
    }
}

impl Tap {
    #[inline]
    fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        (a * (1.0 - self.wx) + b * self.wx) * (1.0 - self.wy)
            + (c * (1.0 - self.wx) + d * self.wx) * self.wy
    }
}

fn warp_taps(flow: &[f64], h: usize, w: usize) -> Vec<Tap> {
    let hw = h * w;
    (0..hw)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            tap(x as f64 + flow[p], y as f64 + flow[hw + p], w, h)
        })
        .collect()
}

/// Backward bilinear warp: `out[c, y, x] = feat[c, y + fy, x + fx]`, with
/// samples clamped to the grid border. `flow` is `[n, 2, h, w]` (dx, dy).
pub fn warp_forward(
    feat: &[f64],
    flow: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    par::for_each_chunk_mut(&mut out, c * hw, |i, o| {
        let taps = warp_taps(&flow[i * 2 * hw..(i + 1) * 2 * hw], h, w);
        for ch in 0..c {
            let plane = &feat[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            for (p, t) in taps.iter().enumerate() {
                o[ch * hw + p] = t.sample(plane, w);
            }
        }
    });
    out
}

/// Returns `(d_feat, d_flow)`.
pub fn warp_backward(
    feat: &[f64],
    flow: &[f64],
    dout: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(n, |i| {
        let taps = warp_taps(&flow[i * 2 * hw..(i + 1) * 2 * hw], h, w);
        let mut dfeat = vec![0.0; c * hw];
        let mut dflow = vec![0.0; 2 * hw];
        for ch in 0..c {
            let plane = &feat[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            let dplane = &mut dfeat[ch * hw..(ch + 1) * hw];
            let dslice = &dout[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            for (p, t) in taps.iter().enumerate() {
                let g = dslice[p];
                if g == 0.0 {
                    continue;
                }
                let (wx, wy) = (t.wx, t.wy);
                dplane[t.y0 * w + t.x0] += g * (1.0 - wx) * (1.0 - wy);
                dplane[t.y0 * w + t.x1] += g * wx * (1.0 - wy);
                dplane[t.y1 * w + t.x0] += g * (1.0 - wx) * wy;
                dplane[t.y1 * w + t.x1] += g * wx * wy;
                let a = plane[t.y0 * w + t.x0];
                let b = plane[t.y0 * w + t.x1];
                let cc = plane[t.y1 * w + t.x0];
                let d = plane[t.y1 * w + t.x1];
                dflow[p] += g * t.gx * ((b - a) * (1.0 - wy) + (d - cc) * wy);
                dflow[hw + p] += g * t.gy * ((cc - a) * (1.0 - wx) + (d - b) * wx);
            }
        }
        (dfeat, dflow)
    });
    let mut dfeat = Vec::with_capacity(n * c * hw);
    let mut dflow = Vec::with_capacity(n * 2 * hw);
    for (a, b) in parts {
        dfeat.extend_from_slice(&a);
        dflow.extend_from_slice(&b);
    }
    (dfeat, dflow)
}

/// Axis-aligned crop window, `[x0, x1) × [y0, y1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Window {
    pub fn full(h: usize, w: usize) -> Self {
        Window {
            x0: 0,
            y0: 0,
            x1: w,
            y1: h,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// 1-D linear interpolation taps for resampling `[lo, hi)` onto `out` cells
/// (half-pixel centers, clamped to the window).
fn axis_taps(lo: usize, hi: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let len = (hi - lo) as f64;
    (0..out)
        .map(|o| {
            let s = lo as f64 + (o as f64 + 0.5) * len / out as f64 - 0.5;
            let s = s.clamp(lo as f64, (hi - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(hi - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear crop-and-resize; `windows[i]` applies to sample `i`.
pub fn crop_resize_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    windows: &[Window],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c * oh * ow];
    par::for_each_chunk_mut(&mut out, c * oh * ow, |i, o| {
        let win = windows[i];
        let ty = axis_taps(win.y0, win.y1, oh);
        let tx = axis_taps(win.x0, win.x1, ow);
        for ch in 0..c {
            let plane = &x[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                    let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                    o[(ch * oh + oy) * ow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn crop_resize_backward(
    dout: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    windows: &[Window],
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * c * h * w];
    par::for_each_chunk_mut(&mut dx, c * h * w, |i, d| {
        let win = windows[i];
        let ty = axis_taps(win.y0, win.y1, oh);
        let tx = axis_taps(win.x0, win.x1, ow);
        for ch in 0..c {
            let plane = &mut d[ch * h * w..(ch + 1) * h * w];
            let g = &dout[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    plane[y0 * w + x0] += v * (1.0 - wx) * (1.0 - wy);
                    plane[y0 * w + x1] += v * wx * (1.0 - wy);
                    plane[y1 * w + x0] += v * (1.0 - wx) * wy;
                    plane[y1 * w + x1] += v * wx * wy;
                }
            }
        }
    });
    dx
}

/// `[n, c, h, w] -> [n, c·r², h/r, w/r]`; output channel `c·r² + dy·r + dx`.
pub fn space_to_depth(x: &[f64], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ch * r * r + (y % r) * r + (xx % r);
                    out[((i * c * r * r + oc) * oh + y / r) * ow + xx / r] =
                        x[((i * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]; `c`, `h`, `w` describe the *output*.
pub fn depth_to_space(x: &[f64], n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ih, iw) = (h / r, w / r);
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let ic = ch * r * r + (y % r) * r + (xx % r);
                    out[((i * c + ch) * h + y) * w + xx] =
                        x[((i * c * r * r + ic) * ih + y / r) * iw + xx / r];
                }
            }
        }
    }
    out
}

/// 2×2 mean pooling, `[n, c, h, w] -> [n, c, h/2, w/2]`.
pub fn avg_pool2(x: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let s = plane[2 * y * w + 2 * xx]
                    + plane[2 * y * w + 2 * xx + 1]
                    + plane[(2 * y + 1) * w + 2 * xx]
                    + plane[(2 * y + 1) * w + 2 * xx + 1];
                out[(p * oh + y) * ow + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dout: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; nc * h * w];
    for p in 0..nc {
        for y in 0..h {
            for xx in 0..w {
                dx[(p * h + y) * w + xx] = 0.25 * dout[(p * oh + y / 2) * ow + xx / 2];
            }
        }
    }
    dx
}
