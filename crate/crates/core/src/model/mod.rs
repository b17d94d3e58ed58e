//! Encoder-decoder feature extractor, superpixel sampling and task heads.
//!
//! The encoder is a residual CNN (basic blocks for the tiny profile,
//! bottleneck blocks for the full profile); the decoder is a single stride-2
//! transposed convolution followed by bilinear upsampling back to the input
//! resolution. Per-cluster embeddings are bilinear crops of the decoder
//! output at each superpixel's bounding box.

pub mod checkpoint;
pub mod interp;
pub mod layers;
pub mod tensor;


use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthio::DepthFrame;
use crate::error::{Error, Result};
use crate::geometry::BBoxNorm;
use crate::superpix;

pub use interp::{sps_sample, sps_sample_backward};
use layers::{ConvSpec, Conv2d, ConvTranspose2d, Linear, MaxPoolCache, Norm, NormCache, Param, Visit};
pub use layers::{Activation, Mode, NormKind};
pub use tensor::{Scalar, Tensor};

/// Depths are clamped to this range before scaling to `[0, 1]`.
pub const DEPTH_RANGE_M: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Tiny,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "full" => Ok(Profile::Full),
            other => Err(Error::invalid(format!("unknown profile `{other}` (expected tiny|full)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (×4).
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stem_width: usize,
    pub stem_kernel: usize,
    /// 3×3/2 max-pool after the stem.
    pub stem_pool: bool,
    pub encoder_widths: Vec<usize>,
    pub encoder_depth_per_stage: Vec<usize>,
    pub block: BlockKind,
    pub norm: NormKind,
    pub activation: Activation,
    pub decoder_channels: usize,
    pub sps_size: usize,
    pub num_seg_classes: usize,
    pub num_activity_classes: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 96,
            stem_width: 8,
            stem_kernel: 3,
            stem_pool: false,
            encoder_widths: vec![8, 16, 32, 64],
            encoder_depth_per_stage: vec![1, 1, 1, 1],
            block: BlockKind::Basic,
            norm: NormKind::Affine,
            activation: Activation::Silu,
            decoder_channels: 16,
            sps_size: 20,
            num_seg_classes: 8,
            num_activity_classes: 5,
        }
    }

    /// ResNet-50 layout.
    pub fn full() -> Self {
        ModelConfig {
            input_size: 224,
            stem_width: 64,
            stem_kernel: 7,
            stem_pool: true,
            encoder_widths: vec![256, 512, 1024, 2048],
            encoder_depth_per_stage: vec![3, 4, 6, 3],
            block: BlockKind::Bottleneck,
            norm: NormKind::Batch,
            activation: Activation::Relu,
            decoder_channels: 32,
            sps_size: 20,
            num_seg_classes: 8,
            num_activity_classes: 5,
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Tiny => Self::tiny(),
            Profile::Full => Self::full(),
        }
    }

    pub fn output_stride(&self) -> usize {
        let pool = if self.stem_pool { 2 } else { 1 };
        2 * pool * (1 << self.encoder_widths.len().saturating_sub(1))
    }

    pub fn encoder_channels(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(self.stem_width)
    }

    pub fn embedding_len(&self) -> usize {
        self.sps_size * self.sps_size * self.decoder_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.encoder_depth_per_stage.len() {
            return fail("encoder_widths and encoder_depth_per_stage must be non-empty and equally long");
        }
        if self.encoder_depth_per_stage.contains(&0) || self.encoder_widths.contains(&0) {
            return fail("stage widths and depths must be positive");
        }
        if self.block == BlockKind::Bottleneck && self.encoder_widths.iter().any(|w| w % 4 != 0) {
            return fail("bottleneck widths must be divisible by 4");
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.output_stride()) {
            return fail("input_size must be a positive multiple of the output stride");
        }
        if self.stem_kernel.is_multiple_of(2) || self.stem_width == 0 {
            return fail("stem_kernel must be odd and stem_width positive");
        }
        if self.decoder_channels == 0 || self.sps_size == 0 {
            return fail("decoder_channels and sps_size must be >= 1");
        }
        if self.num_seg_classes == 0 || self.num_activity_classes == 0 {
            return fail("class counts must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Unit<F> {
    conv: Conv2d<F>,
    norm: Norm<F>,
}

#[derive(Debug, Clone)]
struct UnitCache<F> {
    input: Tensor<F>,
    conv_out: Tensor<F>,
    norm: NormCache<F>,
}

impl<F: Scalar> Unit<F> {
    fn new(spec: ConvSpec, norm: NormKind, rng: &mut ChaCha8Rng) -> Self {
        Unit {
            conv: Conv2d::new(spec, rng),
            norm: Norm::new(norm, spec.cout),
        }
    }

    fn forward(&self, x: &Tensor<F>, mode: Mode) -> (Tensor<F>, UnitCache<F>) {
        let conv_out = self.conv.forward(x);
        let (y, norm) = self.norm.forward(&conv_out, mode);
        (
            y,
            UnitCache {
                input: x.clone(),
                conv_out,
                norm,
            },
        )
    }

    fn backward(&mut self, cache: &UnitCache<F>, dy: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let d = self.norm.backward(&cache.conv_out, &cache.norm, dy, mode);
        self.conv.backward(&cache.input, &d)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        self.conv.visit(f);
        self.norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        self.conv.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// Residual block: a chain of conv+norm units with activations between
/// them, a projection shortcut when the shape changes, and an activation
/// after the sum.
#[derive(Debug, Clone)]
pub struct ResidualBlock<F> {
    units: Vec<Unit<F>>,
    shortcut: Option<Unit<F>>,
    act: Activation,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    units: Vec<UnitCache<F>>,
    /// Pre-activation outputs of every unit but the last.
    pre: Vec<Tensor<F>>,
    shortcut: Option<UnitCache<F>>,
    sum: Tensor<F>,
}

impl<F: Scalar> ResidualBlock<F> {
    fn new(cfg: &ModelConfig, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let (kind, norm) = (cfg.block, cfg.norm);
        let conv = |cin, cout, kernel, stride| ConvSpec {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        };
        let specs = match kind {
            BlockKind::Basic => vec![conv(cin, cout, 3, stride), conv(cout, cout, 3, 1)],
            BlockKind::Bottleneck => {
                let mid = cout / 4;
                vec![conv(cin, mid, 1, 1), conv(mid, mid, 3, stride), conv(mid, cout, 1, 1)]
            }
        };
        let units = specs.into_iter().map(|s| Unit::new(s, norm, rng)).collect();
        let shortcut = (stride != 1 || cin != cout).then(|| Unit::new(conv(cin, cout, 1, stride), norm, rng));
        ResidualBlock {
            units,
            shortcut,
            act: cfg.activation,
        }
    }

    fn forward(&self, x: &Tensor<F>, mode: Mode) -> (Tensor<F>, BlockCache<F>) {
        let mut caches = Vec::with_capacity(self.units.len());
        let mut pre = Vec::with_capacity(self.units.len() - 1);
        let mut h = x.clone();
        for (i, unit) in self.units.iter().enumerate() {
            let (y, c) = unit.forward(&h, mode);
            caches.push(c);
            if i + 1 < self.units.len() {
                h = self.act.forward(&y);
                pre.push(y);
            } else {
                h = y;
            }
        }
        let shortcut = match &self.shortcut {
            Some(unit) => {
                let (s, c) = unit.forward(x, mode);
                h.add_assign(&s);
                Some(c)
            }
            None => {
                h.add_assign(x);
                None
            }
        };
        (
            self.act.forward(&h),
            BlockCache {
                units: caches,
                pre,
                shortcut,
                sum: h,
            },
        )
    }

    fn backward(&mut self, cache: &BlockCache<F>, dy: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let d_sum = self.act.backward(&cache.sum, dy);
        let mut d = d_sum.clone();
        for i in (0..self.units.len()).rev() {
            if i + 1 < self.units.len() {
                d = self.act.backward(&cache.pre[i], &d);
            }
            d = self.units[i].backward(&cache.units[i], &d, mode);
        }
        match (&mut self.shortcut, &cache.shortcut) {
            (Some(unit), Some(c)) => d.add_assign(&unit.backward(c, &d_sum, mode)),
            _ => d.add_assign(&d_sum),
        }
        d
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        self.units.iter().for_each(|u| u.visit(f));
        if let Some(s) = &self.shortcut {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        self.units.iter_mut().for_each(|u| u.visit_mut(f));
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    stem: Unit<F>,
    act: Activation,
    pool: bool,
    blocks: Vec<ResidualBlock<F>>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    stem: UnitCache<F>,
    stem_pre: Tensor<F>,
    pool: Option<MaxPoolCache>,
    blocks: Vec<BlockCache<F>>,
}

impl<F: Scalar> Encoder<F> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let stem = Unit::new(
            ConvSpec {
                cin: 1,
                cout: cfg.stem_width,
                kernel: cfg.stem_kernel,
                stride: 2,
                pad: cfg.stem_kernel / 2,
            },
            cfg.norm,
            rng,
        );
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_width;
        for (stage, (&width, &depth)) in cfg.encoder_widths.iter().zip(&cfg.encoder_depth_per_stage).enumerate() {
            for b in 0..depth {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(cfg, cin, width, stride, rng));
                cin = width;
            }
        }
        Encoder {
            stem,
            act: cfg.activation,
            pool: cfg.stem_pool,
            blocks,
        }
    }

    fn forward(&self, x: &Tensor<F>, mode: Mode) -> (Tensor<F>, EncoderCache<F>) {
        let (stem_pre, stem) = self.stem.forward(x, mode);
        let stem_act = self.act.forward(&stem_pre);
        let (mut h, pool) = if self.pool {
            let (p, c) = layers::max_pool(&stem_act);
            (p, Some(c))
        } else {
            (stem_act, None)
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&h, mode);
            blocks.push(c);
            h = y;
        }
        (
            h,
            EncoderCache {
                stem,
                stem_pre,
                pool,
                blocks,
            },
        )
    }

    fn backward(&mut self, cache: &EncoderCache<F>, dy: &Tensor<F>, mode: Mode) {
        let mut d = dy.clone();
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = block.backward(c, &d, mode);
        }
        if let Some(p) = &cache.pool {
            d = layers::max_pool_backward(cache.stem_pre.shape, p, &d);
        }
        let d = self.act.backward(&cache.stem_pre, &d);
        self.stem.backward(&cache.stem, &d, mode);
    }
}

impl<F: Scalar> Visit<F> for Encoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        self.stem.visit(f);
        self.blocks.iter().for_each(|b| b.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        self.stem.visit_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<F> {
    deconv: ConvTranspose2d<F>,
    output_size: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<F> {
    input: Tensor<F>,
    deconv_shape: [usize; 4],
}

impl<F: Scalar> Decoder<F> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Decoder {
            deconv: ConvTranspose2d::new(
                ConvSpec {
                    cin: cfg.encoder_channels(),
                    cout: cfg.decoder_channels,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                },
                rng,
            ),
            output_size: cfg.input_size,
        }
    }

    fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, DecoderCache<F>) {
        let up = self.deconv.forward(x);
        let out = interp::resize_bilinear(&up, self.output_size, self.output_size);
        (
            out,
            DecoderCache {
                input: x.clone(),
                deconv_shape: up.shape,
            },
        )
    }

    fn backward(&mut self, cache: &DecoderCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let d_up = interp::resize_bilinear_backward(cache.deconv_shape, dy);
        self.deconv.backward(&cache.input, &d_up)
    }
}

impl<F: Scalar> Visit<F> for Decoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        self.deconv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        self.deconv.visit_mut(f);
    }
}

/// Full model: shared encoder/decoder plus segmentation and activity heads.
#[derive(Debug, Clone)]
pub struct Network<F> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
    /// 1×1 convolution on the decoder output.
    pub seg_head: Conv2d<F>,
    /// Fully connected layer on the pooled encoder output.
    pub cls_head: Linear<F>,
}

impl<F: Scalar> Network<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let decoder = Decoder::new(&config, &mut rng);
        let seg_head = Conv2d::new(
            ConvSpec {
                cin: config.decoder_channels,
                cout: config.num_seg_classes,
                kernel: 1,
                stride: 1,
                pad: 0,
            },
            &mut rng,
        );
        let cls_head = Linear::new(config.encoder_channels(), config.num_activity_classes, &mut rng);
        Ok(Network {
            config,
            encoder,
            decoder,
            seg_head,
            cls_head,
        })
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let s = self.config.input_size;
        if x.shape[1..] != [1, s, s] || x.batch() == 0 {
            return Err(Error::shape(format!("[n, 1, {s}, {s}]"), format!("{:?}", x.shape)));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor<F>, mode: Mode) -> Result<(Tensor<F>, EncoderCache<F>)> {
        self.check_input(x)?;
        Ok(self.encoder.forward(x, mode))
    }

    pub fn encode_backward(&mut self, cache: &EncoderCache<F>, dy: &Tensor<F>, mode: Mode) {
        self.encoder.backward(cache, dy, mode);
    }

    pub fn decode(&self, enc: &Tensor<F>) -> Result<(Tensor<F>, DecoderCache<F>)> {
        let s = self.config.input_size / self.config.output_stride();
        if enc.shape[1..] != [self.config.encoder_channels(), s, s] {
            return Err(Error::shape(
                format!("[n, {}, {s}, {s}]", self.config.encoder_channels()),
                format!("{:?}", enc.shape),
            ));
        }
        Ok(self.decoder.forward(enc))
    }

    pub fn decode_backward(&mut self, cache: &DecoderCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        self.decoder.backward(cache, dy)
    }

    /// Dense decoder features for a batch, evaluation mode.
    pub fn dense_features(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (enc, _) = self.encode(x, Mode::Eval)?;
        Ok(self.decode(&enc)?.0)
    }

    pub fn seg_logits(&self, dense: &Tensor<F>) -> Tensor<F> {
        self.seg_head.forward(dense)
    }

    pub fn seg_logits_backward(&mut self, dense: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        self.seg_head.backward(dense, dy)
    }

    pub fn cls_logits(&self, enc: &Tensor<F>) -> Tensor<F> {
        self.cls_head.forward(&layers::global_avg_pool(enc))
    }

    pub fn cls_logits_backward(&mut self, enc: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
        let pooled = layers::global_avg_pool(enc);
        let d = self.cls_head.backward(&pooled, dy);
        layers::global_avg_pool_backward(enc.shape, &d)
    }

    /// `[n, num_seg_classes, input_size, input_size]` class scores.
    pub fn forward_segmentation(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.seg_logits(&self.dense_features(x)?))
    }

    /// `[n, num_activity_classes, 1, 1]` class scores.
    pub fn forward_classification(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (enc, _) = self.encode(x, Mode::Eval)?;
        Ok(self.cls_logits(&enc))
    }

    /// Embedding of one cluster of sample `index` from precomputed dense features.
    pub fn embed(&self, dense: &Tensor<F>, index: usize, bbox: &BBoxNorm) -> Result<Vec<F>> {
        sps_sample(dense, index, bbox, self.config.sps_size)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param<F>, bool)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
        self.seg_head.visit(f);
        self.cls_head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>, bool)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
        self.seg_head.visit_mut(f);
        self.cls_head.visit_mut(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |p, _| p.zero_grad());
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p, trainable| {
            if trainable {
                n += p.value.len();
            }
        });
        n
    }

    /// All parameters and buffers concatenated in declaration order.
    pub fn state_vector(&self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit(&mut |p, _| out.extend_from_slice(&p.value));
        out
    }
}

/// Filled, resized and scaled depth: `[1, 1, size, size]` with values in `[0, 1]`.
pub fn normalize_depth<F: Scalar>(frame: &DepthFrame, input_size: usize) -> Tensor<F> {
    let filled = match superpix::fill_invalid(frame) {
        Ok(f) => f,
        Err(_) => return Tensor::zeros([1, 1, input_size, input_size]),
    };
    let (h, w) = filled.dim();
    let src = Tensor::<f64>::from_vec([1, 1, h, w], filled.iter().copied().collect());
    let resized = interp::resize_bilinear(&src, input_size, input_size);
    Tensor {
        shape: resized.shape,
        data: resized
            .data
            .iter()
            .map(|&d| F::of(d.clamp(0.0, DEPTH_RANGE_M) / DEPTH_RANGE_M))
            .collect(),
    }
}

/// Nearest-neighbour resize of a class mask to `size × size`.
pub fn resize_labels(labels: &ndarray::Array2<u8>, size: usize) -> Vec<u8> {
    let (h, w) = labels.dim();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let sr = ((r as f64 + 0.5) * h as f64 / size as f64).floor().min((h - 1) as f64) as usize;
        for c in 0..size {
            let sc = ((c as f64 + 0.5) * w as f64 / size as f64).floor().min((w - 1) as f64) as usize;
            out.push(labels[[sr, sc]]);
        }
    }
    out
}
