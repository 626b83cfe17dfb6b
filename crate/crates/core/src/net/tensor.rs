//! Dense channel-major tensors and the differentiable primitives the
//! network is assembled from.
//!
//! Every primitive is a plain struct holding its parameters next to
//! their gradient accumulators, with a `forward` that returns the output
//! plus whatever cache its `backward` needs. Backward passes accumulate
//! into the parameter gradients and return the input gradient, so a
//! caller can chain them in reverse order by hand.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::Dims;

/// Channel-major dense field: `data[((c * dz + z) * dy + y) * dx + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, dims: Dims) -> Self {
        Tensor { c, dims, data: vec![0.0; c * dims.len()] }
    }

    pub fn from_data(c: usize, dims: Dims, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * dims.len(), "tensor data length");
        Tensor { c, dims, data }
    }

    pub fn spatial(&self) -> usize {
        self.dims.len()
    }

    /// Immutable view of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 3-D convolution with cubic kernels of side 1 or 3; side-3 kernels use
/// zero padding 1, so stride 1 preserves dims and stride 2 halves them
/// (rounding up).
#[derive(Debug, Clone)]
pub struct Conv {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
}

/// Cache for [`Conv::backward`]: the forward input.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub x: Tensor,
}

impl Conv {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        assert!(k == 1 || k == 3, "kernel side must be 1 or 3");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let n = c_out * c_in * k * k * k;
        Conv {
            c_in,
            c_out,
            k,
            stride,
            w: vec![0.0; n],
            b: vec![0.0; c_out],
            gw: vec![0.0; n],
            gb: vec![0.0; c_out],
        }
    }

    /// He-normal weight init; biases stay zero.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = (self.c_in * self.k * self.k * self.k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        for w in &mut self.w {
            *w = normal.sample(rng);
        }
    }

    pub fn out_dims(&self, dims: Dims) -> Dims {
        if self.k == 1 {
            dims
        } else {
            let f = |n: usize| (n + 2 - 3) / self.stride + 1;
            Dims::new(f(dims.z), f(dims.y), f(dims.x))
        }
    }

    /// Output indices `o` with `0 <= s*o + kk - pad < d`, as a
    /// half-open range clamped to `[0, od)`.
    #[inline]
    fn tap_range(od: usize, d: usize, s: usize, pad: usize, kk: usize) -> (usize, usize) {
        let lo = if kk >= pad { 0 } else { (pad - kk).div_ceil(s) };
        let hi_num = d as isize - 1 + pad as isize - kk as isize;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num as usize / s + 1).min(od);
        (lo.min(hi), hi)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.c_in, "conv input channels");
        let od = self.out_dims(x.dims);
        let mut y = Tensor::zeros(self.c_out, od);
        let (dz, dy, dx) = (x.dims.z, x.dims.y, x.dims.x);
        let sp_in = x.spatial();
        let sp_out = od.len();
        let s = self.stride;
        let pad = usize::from(self.k == 3);
        let kv = self.k * self.k * self.k;
        // Each output row accumulates in a scratch buffer across every
        // (input channel, tap) before a single store; per output voxel
        // the order is bias, then (ci, kz, ky, kx) ascending.
        let mut row = vec![0.0f64; od.x];
        for co in 0..self.c_out {
            let ych = &mut y.data[co * sp_out..(co + 1) * sp_out];
            for zo in 0..od.z {
                for yo in 0..od.y {
                    row.fill(self.b[co]);
                    for ci in 0..self.c_in {
                        let xch = &x.data[ci * sp_in..(ci + 1) * sp_in];
                        let wbase = (co * self.c_in + ci) * kv;
                        if self.k == 1 {
                            let w = self.w[wbase];
                            let (zi, yi) = (s * zo, s * yo);
                            if zi >= dz || yi >= dy {
                                continue;
                            }
                            let src = &xch[(zi * dy + yi) * dx..][..dx];
                            if s == 1 {
                                for (r, v) in row.iter_mut().zip(src) {
                                    *r += w * v;
                                }
                            } else {
                                for (xo, r) in row.iter_mut().enumerate() {
                                    if s * xo < dx {
                                        *r += w * src[s * xo];
                                    }
                                }
                            }
                            continue;
                        }
                        for kz in 0..3 {
                            let zr = s * zo + kz;
                            if zr < pad || zr - pad >= dz {
                                continue;
                            }
                            for ky in 0..3 {
                                let yr = s * yo + ky;
                                if yr < pad || yr - pad >= dy {
                                    continue;
                                }
                                let irow = ((zr - pad) * dy + (yr - pad)) * dx;
                                let src = &xch[irow..irow + dx];
                                let wt = &self.w[wbase + (kz * 3 + ky) * 3..][..3];
                                if s == 1 {
                                    for xo in 1..od.x.saturating_sub(1) {
                                        let mut a = row[xo];
                                        a += wt[0] * src[xo - 1];
                                        a += wt[1] * src[xo];
                                        a += wt[2] * src[xo + 1];
                                        row[xo] = a;
                                    }
                                    let mut a = row[0] + wt[1] * src[0];
                                    if dx > 1 {
                                        a += wt[2] * src[1];
                                    }
                                    row[0] = a;
                                    if od.x > 1 {
                                        let e = od.x - 1;
                                        row[e] += wt[0] * src[e - 1];
                                        row[e] += wt[1] * src[e];
                                    }
                                } else {
                                    for (xo, r) in row.iter_mut().enumerate() {
                                        let base = s * xo;
                                        let mut a = *r;
                                        if base >= 1 {
                                            a += wt[0] * src[base - 1];
                                        }
                                        a += wt[1] * src[base];
                                        if base + 1 < dx {
                                            a += wt[2] * src[base + 1];
                                        }
                                        *r = a;
                                    }
                                }
                            }
                        }
                    }
                    let orow = (zo * od.y + yo) * od.x;
                    ych[orow..orow + od.x].copy_from_slice(&row);
                }
            }
        }
        (y, ConvCache { x: x.clone() })
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, gy: &Tensor) -> Tensor {
        let x = &cache.x;
        let od = self.out_dims(x.dims);
        assert_eq!(gy.dims, od, "conv output-grad dims");
        assert_eq!(gy.c, self.c_out, "conv output-grad channels");
        let mut gx = Tensor::zeros(self.c_in, x.dims);
        let (dz, dy, dx) = (x.dims.z, x.dims.y, x.dims.x);
        let sp_in = x.spatial();
        let sp_out = od.len();
        let s = self.stride;
        let pad = usize::from(self.k == 3);
        let kv = self.k * self.k * self.k;
        for co in 0..self.c_out {
            let gych = &gy.data[co * sp_out..(co + 1) * sp_out];
            self.gb[co] += gych.iter().sum::<f64>();
            for ci in 0..self.c_in {
                let xch = &x.data[ci * sp_in..(ci + 1) * sp_in];
                let gxch = &mut gx.data[ci * sp_in..(ci + 1) * sp_in];
                let wbase = (co * self.c_in + ci) * kv;
                if self.k == 1 {
                    let w = self.w[wbase];
                    let mut acc = 0.0;
                    for zo in 0..od.z {
                        let zi = s * zo;
                        if zi >= dz {
                            continue;
                        }
                        for yo in 0..od.y {
                            let yi = s * yo;
                            if yi >= dy {
                                continue;
                            }
                            let grow = &gych[(zo * od.y + yo) * od.x..][..od.x];
                            let irow = (zi * dy + yi) * dx;
                            for (xo, &g) in grow.iter().enumerate() {
                                let xi = s * xo;
                                if xi < dx {
                                    acc += g * xch[irow + xi];
                                    gxch[irow + xi] += w * g;
                                }
                            }
                        }
                    }
                    self.gw[wbase] += acc;
                    continue;
                }
                for kz in 0..3 {
                    let (zl, zh) = Self::tap_range(od.z, dz, s, pad, kz);
                    for ky in 0..3 {
                        let (yl, yh) = Self::tap_range(od.y, dy, s, pad, ky);
                        let wb = wbase + (kz * 3 + ky) * 3;
                        let wt = &self.w[wb..wb + 3];
                        let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
                        for zo in zl..zh {
                            let zi = s * zo + kz - pad;
                            for yo in yl..yh {
                                let yi = s * yo + ky - pad;
                                let grow = &gych[(zo * od.y + yo) * od.x..][..od.x];
                                let irow = (zi * dy + yi) * dx;
                                let src = &xch[irow..irow + dx];
                                let gdst = &mut gxch[irow..irow + dx];
                                if s == 1 {
                                    for xo in 1..od.x.saturating_sub(1) {
                                        let g = grow[xo];
                                        a0 += g * src[xo - 1];
                                        gdst[xo - 1] += wt[0] * g;
                                        a1 += g * src[xo];
                                        gdst[xo] += wt[1] * g;
                                        a2 += g * src[xo + 1];
                                        gdst[xo + 1] += wt[2] * g;
                                    }
                                    let g = grow[0];
                                    a1 += g * src[0];
                                    gdst[0] += wt[1] * g;
                                    if dx > 1 {
                                        a2 += g * src[1];
                                        gdst[1] += wt[2] * g;
                                    }
                                    if od.x > 1 {
                                        let e = od.x - 1;
                                        let g = grow[e];
                                        a0 += g * src[e - 1];
                                        gdst[e - 1] += wt[0] * g;
                                        a1 += g * src[e];
                                        gdst[e] += wt[1] * g;
                                    }
                                } else {
                                    for (xo, &g) in grow.iter().enumerate() {
                                        let base = s * xo;
                                        if base >= 1 {
                                            a0 += g * src[base - 1];
                                            gdst[base - 1] += wt[0] * g;
                                        }
                                        a1 += g * src[base];
                                        gdst[base] += wt[1] * g;
                                        if base + 1 < dx {
                                            a2 += g * src[base + 1];
                                            gdst[base + 1] += wt[2] * g;
                                        }
                                    }
                                }
                            }
                        }
                        self.gw[wb] += a0;
                        self.gw[wb + 1] += a1;
                        self.gw[wb + 2] += a2;
                    }
                }
            }
        }
        gx
    }
}

/// Instance normalization: per (instance, channel) statistics over the
/// full spatial field, with learnable affine parameters.
#[derive(Debug, Clone)]
pub struct Norm {
    pub c: usize,
    pub eps: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub g_gamma: Vec<f64>,
    pub g_beta: Vec<f64>,
}

/// Cache for [`Norm::backward`].
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

impl Norm {
    pub fn new(c: usize) -> Self {
        Norm {
            c,
            eps: 1e-5,
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            g_gamma: vec![0.0; c],
            g_beta: vec![0.0; c],
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, NormCache) {
        assert_eq!(x.c, self.c, "norm channels");
        let n = x.spatial() as f64;
        let mut y = Tensor::zeros(x.c, x.dims);
        let mut xhat = Tensor::zeros(x.c, x.dims);
        let mut inv_std = vec![0.0; x.c];
        for c in 0..x.c {
            let xs = x.channel(c);
            let mu = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = istd;
            let sp = x.spatial();
            for i in 0..sp {
                let h = (xs[i] - mu) * istd;
                xhat.data[c * sp + i] = h;
                y.data[c * sp + i] = self.gamma[c] * h + self.beta[c];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache, gy: &Tensor) -> Tensor {
        let n = gy.spatial() as f64;
        let sp = gy.spatial();
        let mut gx = Tensor::zeros(gy.c, gy.dims);
        for c in 0..gy.c {
            let g = gy.channel(c);
            let h = cache.xhat.channel(c);
            let sum_g: f64 = g.iter().sum();
            let sum_gh: f64 = g.iter().zip(h).map(|(a, b)| a * b).sum();
            self.g_beta[c] += sum_g;
            self.g_gamma[c] += sum_gh;
            let k = self.gamma[c] * cache.inv_std[c];
            let mean_g = sum_g / n;
            let mean_gh = sum_gh / n;
            for i in 0..sp {
                gx.data[c * sp + i] = k * (g[i] - mean_g - h[i] * mean_gh);
            }
        }
        gx
    }
}

/// Rectifier; the cache is the sign pattern of the output.
pub fn relu(x: &Tensor) -> (Tensor, Vec<bool>) {
    let mut y = x.clone();
    let mut pos = vec![false; x.data.len()];
    for (i, v) in y.data.iter_mut().enumerate() {
        if *v > 0.0 {
            pos[i] = true;
        } else {
            *v = 0.0;
        }
    }
    (y, pos)
}

pub fn relu_backward(pos: &[bool], gy: &Tensor) -> Tensor {
    let mut gx = gy.clone();
    for (g, p) in gx.data.iter_mut().zip(pos) {
        if !p {
            *g = 0.0;
        }
    }
    gx
}

/// Per-axis interpolation table for a doubling trilinear upsample:
/// `(lo, hi, w_hi)` per output index, edge-clamped.
fn up_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (n_in - 1) as f64 {
                (n_in - 1, n_in - 1, 0.0)
            } else {
                let lo = src.floor() as usize;
                (lo, lo + 1, src - lo as f64)
            }
        })
        .collect()
}

/// Trilinear x2 upsample along every axis.
pub fn upsample2(x: &Tensor) -> Tensor {
    let od = Dims::new(x.dims.z * 2, x.dims.y * 2, x.dims.x * 2);
    let (tz, ty, tx) = (up_axis(x.dims.z, od.z), up_axis(x.dims.y, od.y), up_axis(x.dims.x, od.x));
    let mut y = Tensor::zeros(x.c, od);
    let sp_in = x.spatial();
    let sp_out = od.len();
    let (dy_in, dx_in) = (x.dims.y, x.dims.x);
    for c in 0..x.c {
        for (zo, &(z0, z1, wz)) in tz.iter().enumerate() {
            for (yo, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let at = |z: usize, yy: usize, xx: usize| {
                        x.data[c * sp_in + (z * dy_in + yy) * dx_in + xx]
                    };
                    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                    let v = lerp(
                        lerp(lerp(at(z0, y0, x0), at(z0, y0, x1), wx),
                             lerp(at(z0, y1, x0), at(z0, y1, x1), wx), wy),
                        lerp(lerp(at(z1, y0, x0), at(z1, y0, x1), wx),
                             lerp(at(z1, y1, x0), at(z1, y1, x1), wx), wy),
                        wz,
                    );
                    y.data[c * sp_out + (zo * od.y + yo) * od.x + xo] = v;
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: scatter output grads back to input cells.
pub fn upsample2_backward(in_c: usize, in_dims: Dims, gy: &Tensor) -> Tensor {
    let od = gy.dims;
    let (tz, ty, tx) =
        (up_axis(in_dims.z, od.z), up_axis(in_dims.y, od.y), up_axis(in_dims.x, od.x));
    let mut gx = Tensor::zeros(in_c, in_dims);
    let sp_in = in_dims.len();
    let sp_out = od.len();
    let (dy_in, dx_in) = (in_dims.y, in_dims.x);
    for c in 0..in_c {
        for (zo, &(z0, z1, wz)) in tz.iter().enumerate() {
            for (yo, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let g = gy.data[c * sp_out + (zo * od.y + yo) * od.x + xo];
                    if g == 0.0 {
                        continue;
                    }
                    let mut add = |z: usize, yy: usize, xx: usize, w: f64| {
                        gx.data[c * sp_in + (z * dy_in + yy) * dx_in + xx] += g * w;
                    };
                    add(z0, y0, x0, (1.0 - wz) * (1.0 - wy) * (1.0 - wx));
                    add(z0, y0, x1, (1.0 - wz) * (1.0 - wy) * wx);
                    add(z0, y1, x0, (1.0 - wz) * wy * (1.0 - wx));
                    add(z0, y1, x1, (1.0 - wz) * wy * wx);
                    add(z1, y0, x0, wz * (1.0 - wy) * (1.0 - wx));
                    add(z1, y0, x1, wz * (1.0 - wy) * wx);
                    add(z1, y1, x0, wz * wy * (1.0 - wx));
                    add(z1, y1, x1, wz * wy * wx);
                }
            }
        }
    }
    gx
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.dims, b.dims, "concat dims");
    let mut data = Vec::with_capacity((a.c + b.c) * a.spatial());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_data(a.c + b.c, a.dims, data)
}

/// Split a concat gradient back into the two parts.
pub fn concat_backward(a_c: usize, g: &Tensor) -> (Tensor, Tensor) {
    let sp = g.spatial();
    let (ga, gb) = g.data.split_at(a_c * sp);
    (
        Tensor::from_data(a_c, g.dims, ga.to_vec()),
        Tensor::from_data(g.c - a_c, g.dims, gb.to_vec()),
    )
}

/// Per-slice classifier head: in-plane global average pooling followed by
/// a shared linear map and a logistic per slice.
#[derive(Debug, Clone)]
pub struct SliceHead {
    pub c: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
}

/// Cache for [`SliceHead::backward`].
#[derive(Debug, Clone)]
pub struct SliceCache {
    /// `gap[z * c + ch]`: pooled feature per slice.
    pub gap: Vec<f64>,
    pub probs: Vec<f64>,
    pub in_dims: Dims,
}

impl SliceHead {
    pub fn new(c: usize) -> Self {
        SliceHead { c, w: vec![0.0; c], b: vec![0.0; 1], gw: vec![0.0; c], gb: vec![0.0; 1] }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, (2.0 / self.c as f64).sqrt()).expect("finite std");
        for w in &mut self.w {
            *w = normal.sample(rng);
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Vec<f64>, SliceCache) {
        assert_eq!(x.c, self.c, "slice head channels");
        let plane = (x.dims.y * x.dims.x) as f64;
        let sp = x.spatial();
        let mut gap = vec![0.0; x.dims.z * x.c];
        for ch in 0..x.c {
            for z in 0..x.dims.z {
                let start = ch * sp + z * x.dims.y * x.dims.x;
                let s: f64 = x.data[start..start + x.dims.y * x.dims.x].iter().sum();
                gap[z * x.c + ch] = s / plane;
            }
        }
        let probs: Vec<f64> = (0..x.dims.z)
            .map(|z| {
                let logit: f64 = (0..x.c).map(|ch| self.w[ch] * gap[z * x.c + ch]).sum::<f64>()
                    + self.b[0];
                sigmoid(logit)
            })
            .collect();
        (probs.clone(), SliceCache { gap, probs, in_dims: x.dims })
    }

    /// `g_prob` is the gradient w.r.t. the per-slice probabilities.
    pub fn backward(&mut self, cache: &SliceCache, g_prob: &[f64]) -> Tensor {
        let dims = cache.in_dims;
        let plane = (dims.y * dims.x) as f64;
        let mut gx = Tensor::zeros(self.c, dims);
        let sp = dims.len();
        for z in 0..dims.z {
            let p = cache.probs[z];
            let g_logit = g_prob[z] * p * (1.0 - p);
            if g_logit == 0.0 {
                continue;
            }
            self.gb[0] += g_logit;
            for ch in 0..self.c {
                self.gw[ch] += g_logit * cache.gap[z * self.c + ch];
                let gv = g_logit * self.w[ch] / plane;
                let start = ch * sp + z * dims.y * dims.x;
                for v in &mut gx.data[start..start + dims.y * dims.x] {
                    *v += gv;
                }
            }
        }
        gx
    }
}

/// Inverted dropout with keep-scaling; identity when `mask` is `None`.
pub fn dropout_forward(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> (Tensor, Option<Vec<f64>>) {
    match rng {
        Some(rng) if p > 0.0 => {
            use rand::Rng;
            let scale = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.data.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
                .collect();
            let mut y = x.clone();
            for (v, m) in y.data.iter_mut().zip(&mask) {
                *v *= m;
            }
            (y, Some(mask))
        }
        _ => (x.clone(), None),
    }
}

pub fn dropout_backward(mask: &Option<Vec<f64>>, gy: &Tensor) -> Tensor {
    match mask {
        None => gy.clone(),
        Some(m) => {
            let mut gx = gy.clone();
            for (g, k) in gx.data.iter_mut().zip(m) {
                *g *= k;
            }
            gx
        }
    }
}

/// Deterministic parameter RNG for the whole network.
pub fn param_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
