//! Minimal CPU building blocks for the reference segmentation network:
//! im2col convolution, group normalization, ReLU, bilinear resize and
//! channel concatenation, each with a hand-written backward pass.

/// Activation tensor `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// 2-D convolution whose weights live at fixed offsets in a flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Conv2d {
    /// Lays out the layer at `*offset`, advancing it past weights and bias.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        offset: &mut usize,
    ) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        let w_off = *offset;
        let b_off = w_off + cout * cin * kernel * kernel;
        *offset = b_off + cout;
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            dilation,
            w_off,
            b_off,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        (
            (h + 2 * self.pad - span) / self.stride + 1,
            (w + 2 * self.pad - span) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Tensor3, ho: usize, wo: usize) -> Vec<f32> {
        let k = self.kernel;
        let p = ho * wo;
        let mut cols = vec![0.0f32; self.fan_in() * p];
        for ci in 0..self.cin {
            let plane = &x.data[ci * x.hw()..(ci + 1) * x.hw()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f32], h: usize, w: usize, ho: usize, wo: usize) -> Tensor3 {
        let k = self.kernel;
        let p = ho * wo;
        let mut dx = Tensor3::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki * self.dilation) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj * self.dilation) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the column buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, params: &[f32], x: &Tensor3) -> (Tensor3, Vec<f32>) {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let p = ho * wo;
        let cols = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, ho, wo)
        };
        let mut y = Tensor3::zeros(self.cout, ho, wo);
        let fan = self.fan_in();
        let weight = &params[self.w_off..self.w_off + self.cout * fan];
        let bias = &params[self.b_off..self.b_off + self.cout];
        for (co, b) in bias.iter().enumerate() {
            y.data[co * p..(co + 1) * p].fill(*b);
        }
        // y[cout, p] += W[cout, fan] * cols[fan, p]
        unsafe {
            matrixmultiply::sgemm(
                self.cout,
                fan,
                p,
                1.0,
                weight.as_ptr(),
                fan as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                1.0,
                y.data.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        (y, cols)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient
    /// when `need_dx` is set.
    pub fn backward(
        &self,
        params: &[f32],
        in_dims: (usize, usize),
        cols: &[f32],
        dy: &Tensor3,
        grads: &mut [f32],
        need_dx: bool,
    ) -> Option<Tensor3> {
        let (h, w) = in_dims;
        let (ho, wo) = (dy.h, dy.w);
        let p = ho * wo;
        let fan = self.fan_in();
        {
            let dw = &mut grads[self.w_off..self.w_off + self.cout * fan];
            // dW[cout, fan] += dY[cout, p] * cols^T[p, fan]
            unsafe {
                matrixmultiply::sgemm(
                    self.cout,
                    p,
                    fan,
                    1.0,
                    dy.data.as_ptr(),
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    dw.as_mut_ptr(),
                    fan as isize,
                    1,
                );
            }
        }
        for co in 0..self.cout {
            grads[self.b_off + co] += dy.data[co * p..(co + 1) * p].iter().sum::<f32>();
        }
        if !need_dx {
            return None;
        }
        let weight = &params[self.w_off..self.w_off + self.cout * fan];
        let mut dcols = vec![0.0f32; fan * p];
        // dcols[fan, p] = W^T[fan, cout] * dY[cout, p]
        unsafe {
            matrixmultiply::sgemm(
                fan,
                self.cout,
                p,
                1.0,
                weight.as_ptr(),
                1,
                fan as isize,
                dy.data.as_ptr(),
                p as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        if self.is_pointwise() {
            Some(Tensor3 {
                c: self.cin,
                h,
                w,
                data: dcols,
            })
        } else {
            Some(self.col2im(&dcols, h, w, ho, wo))
        }
    }
}

/// Group normalization over `[C, H, W]` with per-channel affine parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
    pub g_off: usize,
    pub b_off: usize,
}

/// Normalized activations and per-group inverse std kept for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    /// `groups` must divide `channels`.
    pub fn new(channels: usize, groups: usize, offset: &mut usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{groups} groups for {channels} channels");
        let g_off = *offset;
        let b_off = g_off + channels;
        *offset = b_off + channels;
        Self {
            channels,
            groups,
            eps: 1e-5,
            g_off,
            b_off,
        }
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.g_off..self.b_off + self.channels
    }

    pub fn forward(&self, params: &[f32], x: &Tensor3) -> (Tensor3, GroupNormCache) {
        debug_assert_eq!(x.c, self.channels);
        let hw = x.hw();
        let n = (self.channels / self.groups) * hw;
        let mut y = Tensor3::zeros(x.c, x.h, x.w);
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = g * n..(g + 1) * n;
            let src = &x.data[span.clone()];
            let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            let var = src.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + f64::from(self.eps)).sqrt();
            inv_std.push(inv as f32);
            for (h, &v) in xhat[span].iter_mut().zip(src) {
                *h = ((f64::from(v) - mean) * inv) as f32;
            }
        }
        for c in 0..x.c {
            let (gamma, beta) = (params[self.g_off + c], params[self.b_off + c]);
            let r = c * hw..(c + 1) * hw;
            for (o, &h) in y.data[r.clone()].iter_mut().zip(&xhat[r]) {
                *o = gamma * h + beta;
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    /// Accumulates affine-parameter gradients and returns `d loss / d x`.
    pub fn backward(
        &self,
        params: &[f32],
        cache: &GroupNormCache,
        dy: &Tensor3,
        grads: &mut [f32],
    ) -> Tensor3 {
        let hw = dy.hw();
        let cpg = self.channels / self.groups;
        let n = cpg * hw;
        let mut dxhat = vec![0.0f32; dy.data.len()];
        for c in 0..dy.c {
            let r = c * hw..(c + 1) * hw;
            let gamma = params[self.g_off + c];
            let (mut dg, mut db) = (0.0f64, 0.0f64);
            for ((d, &g), &h) in dxhat[r.clone()].iter_mut().zip(&dy.data[r.clone()]).zip(&cache.xhat[r]) {
                dg += f64::from(g) * f64::from(h);
                db += f64::from(g);
                *d = g * gamma;
            }
            grads[self.g_off + c] += dg as f32;
            grads[self.b_off + c] += db as f32;
        }
        let mut dx = Tensor3::zeros(dy.c, dy.h, dy.w);
        for g in 0..self.groups {
            let span = g * n..(g + 1) * n;
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for (&d, &h) in dxhat[span.clone()].iter().zip(&cache.xhat[span.clone()]) {
                s1 += f64::from(d);
                s2 += f64::from(d) * f64::from(h);
            }
            let (m1, m2) = (s1 / n as f64, s2 / n as f64);
            let inv = f64::from(cache.inv_std[g]);
            for ((o, &d), &h) in dx.data[span.clone()].iter_mut().zip(&dxhat[span.clone()]).zip(&cache.xhat[span]) {
                *o = (inv * (f64::from(d) - m1 - f64::from(h) * m2)) as f32;
            }
        }
        dx
    }
}

pub fn relu_inplace(x: &mut Tensor3) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward(y: &Tensor3, dy: &mut Tensor3) {
    for (g, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Source taps of a 1-D half-pixel-centre linear resize.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = (src - i0 as f64) as f32;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize (`align_corners = false` convention).
pub fn resize_bilinear(x: &Tensor3, h: usize, w: usize) -> Tensor3 {
    let ty = linear_taps(x.h, h);
    let tx = linear_taps(x.w, w);
    let mut y = Tensor3::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = &x.data[c * x.hw()..(c + 1) * x.hw()];
        let dst = &mut y.data[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * x.w..(y0 + 1) * x.w];
            let r1 = &src[y1 * x.w..(y1 + 1) * x.w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * w + ox] = top + (bot - top) * fy;
            }
        }
    }
    y
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(dy: &Tensor3, h: usize, w: usize) -> Tensor3 {
    let ty = linear_taps(h, dy.h);
    let tx = linear_taps(w, dy.w);
    let mut dx = Tensor3::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = &dy.data[c * dy.hw()..(c + 1) * dy.hw()];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * dy.w + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

pub fn concat(a: &Tensor3, b: &Tensor3) -> Tensor3 {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor3 {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Splits a gradient of `concat(a, b)` back into its two parts.
pub fn split(d: Tensor3, c_first: usize) -> (Tensor3, Tensor3) {
    let hw = d.hw();
    let mut data = d.data;
    let second = data.split_off(c_first * hw);
    (
        Tensor3 {
            c: c_first,
            h: d.h,
            w: d.w,
            data,
        },
        Tensor3 {
            c: d.c - c_first,
            h: d.h,
            w: d.w,
            data: second,
        },
    )
}

pub fn add_assign(a: &mut Tensor3, b: &Tensor3) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}
