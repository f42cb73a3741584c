//! CPU layers with explicit backward passes.
//!
//! Activations use a channel-major `[C, N, H, W]` layout so that every
//! channel is one contiguous run of `N * H * W` values. Convolutions lower
//! to a single GEMM over the whole batch via im2col, batch norm reduces
//! over contiguous rows, and a dense layer is a 1x1 convolution over
//! `[C, N, 1, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Trained, with weight decay.
    Weight,
    /// Trained, no weight decay (biases, norm scales and shifts).
    NoDecay,
    /// Persistent state that is not trained (running statistics).
    Buffer,
}

/// A named array owned by a layer, with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub role: ParamRole,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f32>, role: ParamRole) -> Self {
        let grad = if role == ParamRole::Buffer { Vec::new() } else { vec![0.0; value.len()] };
        Param { name, shape, value, grad, role }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub(crate) trait Params {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));
}

/// `[C, N, H, W]` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        FeatureMap { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape
/// `m x k` and `op(B)` of shape `k x n`. `a_t` / `b_t` mean the operand is
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the stated row-major
    // layouts and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
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

fn out_dim(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    col: Vec<f32>,
    input: (usize, usize, usize, usize),
}

impl Conv2d {
    /// Kaiming-normal (fan-out) init, no bias.
    pub fn new(name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (out_c * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = (0..out_c * in_c * k * k).map(|_| normal.sample(rng) as f32).collect();
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::new(format!("{name}.weight"), vec![out_c, in_c, k, k], value, ParamRole::Weight),
            bias: None,
            cache: None,
        }
    }

    /// Dense layer as a 1x1 convolution, uniform(+-1/sqrt(fan_in)) init.
    pub fn dense(name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_f as f32).sqrt();
        let w = (0..out_f * in_f).map(|_| rng.random_range(-bound..=bound)).collect();
        let b = (0..out_f).map(|_| rng.random_range(-bound..=bound)).collect();
        Conv2d {
            in_c: in_f,
            out_c: out_f,
            k: 1,
            stride: 1,
            pad: 0,
            weight: Param::new(format!("{name}.weight"), vec![out_f, in_f], w, ParamRole::Weight),
            bias: Some(Param::new(format!("{name}.bias"), vec![out_f], b, ParamRole::NoDecay)),
            cache: None,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &FeatureMap, ho: usize, wo: usize) -> Vec<f32> {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let cols = x.n * ho * wo;
        let mut col = vec![0.0f32; x.c * k * k * cols];
        let hw = x.h * x.w;
        for ci in 0..x.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for b in 0..x.n {
                        let src = &x.data[(ci * x.n + b) * hw..(ci * x.n + b + 1) * hw];
                        let dst = &mut dst[b * ho * wo..(b + 1) * ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> FeatureMap {
        let (c, n, h, w) = shape;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let cols = n * ho * wo;
        let mut x = FeatureMap::zeros(c, n, h, w);
        let hw = h * w;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for b in 0..n {
                        let dst = &mut x.data[(ci * n + b) * hw..(ci * n + b + 1) * hw];
                        let src = &src[b * ho * wo..(b + 1) * ho * wo];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn compute(&self, x: &FeatureMap, col: &[f32], ho: usize, wo: usize) -> FeatureMap {
        let mut y = FeatureMap::zeros(self.out_c, x.n, ho, wo);
        let m = x.n * ho * wo;
        let kk = self.in_c * self.k * self.k;
        gemm(self.out_c, kk, m, &self.weight.value, false, col, false, 0.0, &mut y.data);
        if let Some(b) = &self.bias {
            for (row, &bv) in y.data.chunks_mut(m).zip(&b.value) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        y
    }

    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.c, self.in_c);
        let ho = out_dim(x.h, self.k, self.stride, self.pad);
        let wo = out_dim(x.w, self.k, self.stride, self.pad);
        if self.is_pointwise() {
            self.compute(x, &x.data, ho, wo)
        } else {
            let col = self.im2col(x, ho, wo);
            self.compute(x, &col, ho, wo)
        }
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.c, self.in_c);
        let ho = out_dim(x.h, self.k, self.stride, self.pad);
        let wo = out_dim(x.w, self.k, self.stride, self.pad);
        let col = if self.is_pointwise() { x.data.clone() } else { self.im2col(x, ho, wo) };
        let y = self.compute(x, &col, ho, wo);
        self.cache = Some(ConvCache { col, input: (x.c, x.n, x.h, x.w) });
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input_grad`.
    pub fn backward(&mut self, dy: &FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        let cache = self.cache.take().expect("conv backward without forward");
        let m = dy.plane();
        let kk = self.in_c * self.k * self.k;
        gemm(self.out_c, m, kk, &dy.data, false, &cache.col, true, 1.0, &mut self.weight.grad);
        if let Some(b) = &mut self.bias {
            for (g, row) in b.grad.iter_mut().zip(dy.data.chunks(m)) {
                *g += row.iter().sum::<f32>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![0.0f32; kk * m];
        gemm(kk, self.out_c, m, &self.weight.value, true, &dy.data, false, 0.0, &mut dcol);
        let (c, n, h, w) = cache.input;
        if self.is_pointwise() {
            Some(FeatureMap { c, n, h, w, data: dcol })
        } else {
            Some(self.col2im(&dcol, cache.input, dy.h, dy.w))
        }
    }
}

impl Params for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Batch normalization over every axis except channels.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.weight"), vec![c], vec![1.0; c], ParamRole::NoDecay),
            beta: Param::new(format!("{name}.bias"), vec![c], vec![0.0; c], ParamRole::NoDecay),
            running_mean: Param::new(format!("{name}.running_mean"), vec![c], vec![0.0; c], ParamRole::Buffer),
            running_var: Param::new(format!("{name}.running_var"), vec![c], vec![1.0; c], ParamRole::Buffer),
            cache: None,
        }
    }

    pub fn infer(&self, mut x: FeatureMap) -> FeatureMap {
        let m = x.plane();
        for (ch, row) in x.data.chunks_mut(m).enumerate() {
            let inv = 1.0 / (self.running_var.value[ch] + BN_EPS).sqrt();
            let scale = self.gamma.value[ch] * inv;
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            row.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        x
    }

    pub fn forward(&mut self, mut x: FeatureMap) -> FeatureMap {
        let m = x.plane();
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; x.c];
        for (ch, (row, hat)) in x.data.chunks_mut(m).zip(xhat.chunks_mut(m)).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + BN_EPS as f64).sqrt();
            inv_std[ch] = inv as f32;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for (v, h) in row.iter_mut().zip(hat.iter_mut()) {
                *h = ((*v as f64 - mean) * inv) as f32;
                *v = g * *h + b;
            }
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean as f32;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        x
    }

    pub fn backward(&mut self, mut dy: FeatureMap) -> FeatureMap {
        let cache = self.cache.take().expect("batch norm backward without forward");
        let m = dy.plane();
        for (ch, (row, hat)) in dy.data.chunks_mut(m).zip(cache.xhat.chunks(m)).enumerate() {
            let sum_dy: f64 = row.iter().map(|&v| v as f64).sum();
            let sum_dy_xhat: f64 = row.iter().zip(hat).map(|(&d, &h)| d as f64 * h as f64).sum();
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let g = self.gamma.value[ch] as f64;
            let k = g * cache.inv_std[ch] as f64 / m as f64;
            for (d, &h) in row.iter_mut().zip(hat) {
                *d = (k * (m as f64 * *d as f64 - sum_dy - h as f64 * sum_dy_xhat)) as f32;
            }
        }
        dy
    }
}

impl Params for BatchNorm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// In-place ReLU; returns the activation mask for the backward pass.
pub fn relu(x: &mut FeatureMap) -> Vec<bool> {
    x.data
        .iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

pub fn relu_infer(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn relu_backward(dy: &mut FeatureMap, mask: &[bool]) {
    dy.data.iter_mut().zip(mask).for_each(|(d, &on)| {
        if !on {
            *d = 0.0;
        }
    });
}

/// 3x3, stride 2, padding 1 max pooling.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    cache: Option<(Vec<u32>, (usize, usize, usize, usize))>,
}

impl MaxPool {
    const K: usize = 3;
    const S: usize = 2;
    const P: usize = 1;

    fn run(x: &FeatureMap) -> (FeatureMap, Vec<u32>) {
        let ho = out_dim(x.h, Self::K, Self::S, Self::P);
        let wo = out_dim(x.w, Self::K, Self::S, Self::P);
        let mut y = FeatureMap::zeros(x.c, x.n, ho, wo);
        let mut arg = vec![0u32; y.data.len()];
        let hw = x.h * x.w;
        for plane in 0..x.c * x.n {
            let src = &x.data[plane * hw..(plane + 1) * hw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..Self::K {
                        let iy = (oy * Self::S + ky) as isize - Self::P as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..Self::K {
                            let ix = (ox * Self::S + kx) as isize - Self::P as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = iy as usize * x.w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    y.data[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
        (y, arg)
    }

    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        Self::run(x).0
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let (y, arg) = Self::run(x);
        self.cache = Some((arg, (x.c, x.n, x.h, x.w)));
        y
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> FeatureMap {
        let (arg, (c, n, h, w)) = self.cache.take().expect("max pool backward without forward");
        let mut dx = FeatureMap::zeros(c, n, h, w);
        let (hw, howo) = (h * w, dy.h * dy.w);
        for plane in 0..c * n {
            for o in 0..howo {
                let idx = plane * howo + o;
                dx.data[plane * hw + arg[idx] as usize] += dy.data[idx];
            }
        }
        dx
    }
}

/// Mean over `H x W`, producing `[C, N, 1, 1]`.
pub fn global_avg_pool(x: &FeatureMap) -> FeatureMap {
    let hw = x.h * x.w;
    let data = x
        .data
        .chunks(hw)
        .map(|s| (s.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    FeatureMap { c: x.c, n: x.n, h: 1, w: 1, data }
}

pub fn global_avg_pool_backward(dy: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let hw = h * w;
    let mut dx = FeatureMap::zeros(dy.c, dy.n, h, w);
    for (chunk, &g) in dx.data.chunks_mut(hw).zip(&dy.data) {
        let v = g / hw as f32;
        chunk.iter_mut().for_each(|d| *d = v);
    }
    dx
}
