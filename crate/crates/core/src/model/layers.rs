//! Trainable layers with hand-written backward passes.
//!
//! Forward passes borrow the layer immutably and return whatever the backward
//! pass needs; backward passes accumulate into each [`Param`]'s gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Vec<F>) -> Self {
        let grad = vec![F::zero(); value.len()];
        Param { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Param::new(vec![F::zero(); len])
    }

    pub fn filled(len: usize, v: F) -> Self {
        Param::new(vec![v; len])
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn fan_in_uniform(len: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Param::new((0..len).map(|_| F::of(rng.random_range(-bound..bound))).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Walks parameters in declaration order. `trainable` is false for buffers
/// such as batch-norm running statistics.
pub trait Visit<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool));
}

/// Lays out the receptive fields of `img` (`c × h × w`) as columns of a
/// `(c·k·k) × (oh·ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    img: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [F],
) {
    let n = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [F],
) {
    let n = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub spec: ConvSpec,
    /// `cout × (cin·k·k)`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = spec.cin * spec.kernel * spec.kernel;
        Conv2d {
            spec,
            weight: Param::fan_in_uniform(spec.cout * fan_in, fan_in, rng),
            bias: Param::zeros(spec.cout),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let s = self.spec;
        let [n, c, h, w] = x.shape;
        assert_eq!(c, s.cin, "conv input channels");
        let (oh, ow) = s.out_size(h, w);
        let ckk = s.cin * s.kernel * s.kernel;
        let mut out = Tensor::zeros([n, s.cout, oh, ow]);
        let mut cols = if s.is_pointwise() { Vec::new() } else { vec![F::zero(); ckk * oh * ow] };
        for i in 0..n {
            let b: &[F] = if s.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), c, h, w, s.kernel, s.stride, s.pad, oh, ow, &mut cols);
                &cols
            };
            let o = out.sample_mut(i);
            for (co, line) in o.chunks_mut(oh * ow).enumerate() {
                line.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            F::gemm(s.cout, ckk, oh * ow, &self.weight.value, false, b, false, o, F::one());
        }
        out
    }

    /// Returns the input gradient; weight and bias gradients accumulate.
    pub fn backward(&mut self, x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        let s = self.spec;
        let [n, c, h, w] = x.shape;
        let (oh, ow) = (dy.height(), dy.width());
        let ckk = s.cin * s.kernel * s.kernel;
        let mut dx = Tensor::zeros(x.shape);
        let mut cols = vec![F::zero(); ckk * oh * ow];
        let mut dcols = vec![F::zero(); ckk * oh * ow];
        for i in 0..n {
            let g = dy.sample(i);
            for (co, line) in g.chunks(oh * ow).enumerate() {
                self.bias.grad[co] += line.iter().copied().sum();
            }
            if s.is_pointwise() {
                F::gemm(s.cout, oh * ow, ckk, g, false, x.sample(i), true, &mut self.weight.grad, F::one());
                F::gemm(ckk, s.cout, oh * ow, &self.weight.value, true, g, false, dx.sample_mut(i), F::zero());
            } else {
                im2col(x.sample(i), c, h, w, s.kernel, s.stride, s.pad, oh, ow, &mut cols);
                F::gemm(s.cout, oh * ow, ckk, g, false, &cols, true, &mut self.weight.grad, F::one());
                F::gemm(ckk, s.cout, oh * ow, &self.weight.value, true, g, false, &mut dcols, F::zero());
                col2im(&dcols, c, h, w, s.kernel, s.stride, s.pad, oh, ow, dx.sample_mut(i));
            }
        }
        dx
    }
}

impl<F: Scalar> Visit<F> for Conv2d<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        f(&self.weight, true);
        f(&self.bias, true);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        f(&mut self.weight, true);
        f(&mut self.bias, true);
    }
}

/// Transposed convolution; output size `(h-1)·stride - 2·pad + kernel`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F> {
    pub spec: ConvSpec,
    /// `cin × (cout·k·k)`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        // Each output pixel sees about cin·(k/stride)² inputs.
        let fan_in = (spec.cin * spec.kernel * spec.kernel / (spec.stride * spec.stride)).max(1);
        ConvTranspose2d {
            spec,
            weight: Param::fan_in_uniform(spec.cin * spec.cout * spec.kernel * spec.kernel, fan_in, rng),
            bias: Param::zeros(spec.cout),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.spec;
        (
            (h - 1) * s.stride + s.kernel - 2 * s.pad,
            (w - 1) * s.stride + s.kernel - 2 * s.pad,
        )
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let s = self.spec;
        let [n, c, h, w] = x.shape;
        assert_eq!(c, s.cin, "transposed conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let ckk = s.cout * s.kernel * s.kernel;
        let mut out = Tensor::zeros([n, s.cout, oh, ow]);
        let mut cols = vec![F::zero(); ckk * h * w];
        for i in 0..n {
            F::gemm(ckk, s.cin, h * w, &self.weight.value, true, x.sample(i), false, &mut cols, F::zero());
            let o = out.sample_mut(i);
            col2im(&cols, s.cout, oh, ow, s.kernel, s.stride, s.pad, h, w, o);
            for (co, line) in o.chunks_mut(oh * ow).enumerate() {
                line.iter_mut().for_each(|v| *v += self.bias.value[co]);
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        let s = self.spec;
        let [n, _, h, w] = x.shape;
        let (oh, ow) = (dy.height(), dy.width());
        let ckk = s.cout * s.kernel * s.kernel;
        let mut dx = Tensor::zeros(x.shape);
        let mut dcols = vec![F::zero(); ckk * h * w];
        for i in 0..n {
            let g = dy.sample(i);
            for (co, line) in g.chunks(oh * ow).enumerate() {
                self.bias.grad[co] += line.iter().copied().sum();
            }
            im2col(g, s.cout, oh, ow, s.kernel, s.stride, s.pad, h, w, &mut dcols);
            F::gemm(s.cin, h * w, ckk, x.sample(i), false, &dcols, true, &mut self.weight.grad, F::one());
            F::gemm(s.cin, ckk, h * w, &self.weight.value, false, &dcols, false, dx.sample_mut(i), F::zero());
        }
        dx
    }
}

impl<F: Scalar> Visit<F> for ConvTranspose2d<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        f(&self.weight, true);
        f(&self.bias, true);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        f(&mut self.weight, true);
        f(&mut self.bias, true);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-channel scale and shift only; no batch statistics.
    Affine,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Norm<F> {
    pub kind: NormKind,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
}

/// Per-channel batch statistics captured by a training-mode forward.
#[derive(Debug, Clone)]
pub struct NormCache<F> {
    xhat: Option<Tensor<F>>,
    mean: Vec<F>,
    var: Vec<F>,
}

impl<F: Scalar> Norm<F> {
    pub fn new(kind: NormKind, channels: usize) -> Self {
        Norm {
            kind,
            gamma: Param::filled(channels, F::one()),
            beta: Param::zeros(channels),
            running_mean: Param::zeros(if kind == NormKind::Batch { channels } else { 0 }),
            running_var: Param::filled(if kind == NormKind::Batch { channels } else { 0 }, F::one()),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, mode: Mode) -> (Tensor<F>, NormCache<F>) {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let mut y = x.clone();
        let batch_stats = self.kind == NormKind::Batch && mode == Mode::Train;
        let (mean, var) = match self.kind {
            NormKind::Affine => (vec![F::zero(); c], vec![F::one(); c]),
            NormKind::Batch if batch_stats => {
                let m = F::of((n * hw) as f64);
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for i in 0..n {
                    for (ch, line) in x.sample(i).chunks(hw).enumerate() {
                        mean[ch] += line.iter().copied().sum();
                    }
                }
                mean.iter_mut().for_each(|v| *v = *v / m);
                for i in 0..n {
                    for (ch, line) in x.sample(i).chunks(hw).enumerate() {
                        var[ch] += line.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum();
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / m);
                (mean, var)
            }
            NormKind::Batch => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let mut xhat = if self.kind == NormKind::Batch { Some(x.clone()) } else { None };
        for i in 0..n {
            for ch in 0..c {
                let off = i * c * hw + ch * hw;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                match (&mut xhat, self.kind) {
                    (Some(xh), NormKind::Batch) => {
                        let inv = F::one() / (var[ch] + F::of(BN_EPS)).sqrt();
                        for j in off..off + hw {
                            let v = (x.data[j] - mean[ch]) * inv;
                            xh.data[j] = v;
                            y.data[j] = g * v + b;
                        }
                    }
                    _ => {
                        for v in &mut y.data[off..off + hw] {
                            *v = g * *v + b;
                        }
                    }
                }
            }
        }
        (y, NormCache { xhat, mean, var })
    }

    /// Backward pass. In training mode the running statistics are folded in here.
    pub fn backward(&mut self, x: &Tensor<F>, cache: &NormCache<F>, dy: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let mut dx = Tensor::zeros(x.shape);
        match self.kind {
            NormKind::Affine => {
                for i in 0..n {
                    for ch in 0..c {
                        let off = i * c * hw + ch * hw;
                        let g = self.gamma.value[ch];
                        for j in off..off + hw {
                            self.gamma.grad[ch] += dy.data[j] * x.data[j];
                            self.beta.grad[ch] += dy.data[j];
                            dx.data[j] = g * dy.data[j];
                        }
                    }
                }
            }
            NormKind::Batch => {
                let xhat = cache.xhat.as_ref().expect("batch norm cache");
                let m = F::of((n * hw) as f64);
                for ch in 0..c {
                    let inv = F::one() / (cache.var[ch] + F::of(BN_EPS)).sqrt();
                    let (mut sum_dy, mut sum_dy_xhat) = (F::zero(), F::zero());
                    for i in 0..n {
                        let off = i * c * hw + ch * hw;
                        for j in off..off + hw {
                            sum_dy += dy.data[j];
                            sum_dy_xhat += dy.data[j] * xhat.data[j];
                        }
                    }
                    self.gamma.grad[ch] += sum_dy_xhat;
                    self.beta.grad[ch] += sum_dy;
                    let g = self.gamma.value[ch];
                    for i in 0..n {
                        let off = i * c * hw + ch * hw;
                        for j in off..off + hw {
                            dx.data[j] = if mode == Mode::Train {
                                g * inv / m * (m * dy.data[j] - sum_dy - xhat.data[j] * sum_dy_xhat)
                            } else {
                                g * inv * dy.data[j]
                            };
                        }
                    }
                }
                if mode == Mode::Train {
                    let mom = F::of(BN_MOMENTUM);
                    let count = (n * hw) as f64;
                    let unbias = F::of(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
                    for ch in 0..c {
                        let rm = &mut self.running_mean.value[ch];
                        *rm = (F::one() - mom) * *rm + mom * cache.mean[ch];
                        let rv = &mut self.running_var.value[ch];
                        *rv = (F::one() - mom) * *rv + mom * cache.var[ch] * unbias;
                    }
                }
            }
        }
        dx
    }
}

impl<F: Scalar> Visit<F> for Norm<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        f(&self.gamma, true);
        f(&self.beta, true);
        if self.kind == NormKind::Batch {
            f(&self.running_mean, false);
            f(&self.running_var, false);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        f(&mut self.gamma, true);
        f(&mut self.beta, true);
        if self.kind == NormKind::Batch {
            f(&mut self.running_mean, false);
            f(&mut self.running_var, false);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `x·sigmoid(x)`; smooth, so finite differences behave at any step size.
    Silu,
}

impl Activation {
    pub fn forward<F: Scalar>(self, x: &Tensor<F>) -> Tensor<F> {
        match self {
            Activation::Relu => x.map(|v| if v > F::zero() { v } else { F::zero() }),
            Activation::Silu => x.map(|v| v / (F::one() + (-v).exp())),
        }
    }

    /// Gradient given the pre-activation input.
    pub fn backward<F: Scalar>(self, pre: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        let data = pre.data.iter().zip(&dy.data);
        let data = match self {
            Activation::Relu => data.map(|(&x, &g)| if x > F::zero() { g } else { F::zero() }).collect(),
            Activation::Silu => data
                .map(|(&x, &g)| {
                    let s = F::one() / (F::one() + (-x).exp());
                    g * s * (F::one() + x * (F::one() - s))
                })
                .collect(),
        };
        Tensor { shape: dy.shape, data }
    }
}

/// 3×3, stride 2, padding 1 max pooling.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
}

pub fn max_pool<F: Scalar>(x: &Tensor<F>) -> (Tensor<F>, MaxPoolCache) {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (F::neg_infinity(), base);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x.data[idx] > best.0 {
                            best = (x.data[idx], idx);
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out.data[o] = best.0;
                argmax[o] = best.1;
            }
        }
    }
    (out, MaxPoolCache { argmax })
}

pub fn max_pool_backward<F: Scalar>(in_shape: [usize; 4], cache: &MaxPoolCache, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(in_shape);
    for (o, &src) in cache.argmax.iter().enumerate() {
        dx.data[src] += dy.data[o];
    }
    dx
}

/// Fully connected layer on `[n, in, 1, 1]` tensors.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Linear {
            inputs,
            outputs,
            weight: Param::fan_in_uniform(inputs * outputs, inputs, rng),
            bias: Param::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.inputs, "linear input size");
        let mut out = Tensor::zeros([n, self.outputs, 1, 1]);
        for i in 0..n {
            out.sample_mut(i).copy_from_slice(&self.bias.value);
        }
        F::gemm(n, self.inputs, self.outputs, &x.data, false, &self.weight.value, true, &mut out.data, F::one());
        out
    }

    pub fn backward(&mut self, x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        let n = x.batch();
        for i in 0..n {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.sample(i)) {
                *g += d;
            }
        }
        F::gemm(self.outputs, n, self.inputs, &dy.data, true, &x.data, false, &mut self.weight.grad, F::one());
        let mut dx = Tensor::zeros(x.shape);
        F::gemm(n, self.outputs, self.inputs, &dy.data, false, &self.weight.value, false, &mut dx.data, F::zero());
        dx
    }
}

impl<F: Scalar> Visit<F> for Linear<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        f(&self.weight, true);
        f(&self.bias, true);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        f(&mut self.weight, true);
        f(&mut self.bias, true);
    }
}

pub fn global_avg_pool<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = x.shape;
    let hw = F::of((h * w) as f64);
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for (o, plane) in out.data.iter_mut().zip(x.data.chunks(h * w)) {
        *o = plane.iter().copied().sum::<F>() / hw;
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(in_shape: [usize; 4], dy: &Tensor<F>) -> Tensor<F> {
    let [_, _, h, w] = in_shape;
    let hw = F::of((h * w) as f64);
    let mut dx = Tensor::zeros(in_shape);
    for (plane, &g) in dx.data.chunks_mut(h * w).zip(&dy.data) {
        plane.iter_mut().for_each(|v| *v = g / hw);
    }
    dx
}
