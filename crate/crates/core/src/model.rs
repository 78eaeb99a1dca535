//! The full alignment-and-zoom network: shared feature extraction, offset
//! learning, deformable alignment, the aligned-output head and an
//! SRResNet-style trunk with pixel-shuffle upsampling.
//!
//! Backpropagation is hand-chained: [`forward_cached`] keeps every
//! intermediate the adjoints need and [`backward`] walks them in reverse.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    flip_augmented_reference_backward, flip_augmented_reference_forward, offset_head_backward,
    offset_head_forward, AttentionParams, CpaParams, FlipAugCache, OffsetAttention, OffsetHead,
    OffsetHeadCache,
};
use crate::conv::{conv2d, conv2d_backward, ConvParams};
use crate::deform::{
    bilinear_sample, deform_conv_backward, deform_conv_forward, upsample_mask, validity_mask, OffsetField,
    OffsetMode, ValidityMask,
};
use crate::error::{Result, SdanError};
use crate::ops::{activation, depth_to_space, relu_backward_from_output, space_to_depth, Activation};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    Channel,
    Cpa,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::None => "none",
            AttentionKind::Channel => "channel",
            AttentionKind::Cpa => "cpa",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = SdanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionKind::None),
            "channel" => Ok(AttentionKind::Channel),
            "cpa" => Ok(AttentionKind::Cpa),
            other => Err(SdanError::config(format!("unknown attention '{other}'"))),
        }
    }
}

impl fmt::Display for OffsetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OffsetMode::Squared => "squared",
            OffsetMode::PerPoint => "per-point",
        })
    }
}

impl FromStr for OffsetMode {
    type Err = SdanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(OffsetMode::Squared),
            "per-point" | "per_point" => Ok(OffsetMode::PerPoint),
            other => Err(SdanError::config(format!("unknown offset mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// 3 for RGB input, 4 for RGGB-packed RAW input.
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_res_blocks: usize,
    pub scale: usize,
    pub offset_mode: OffsetMode,
    pub attention: AttentionKind,
    pub flip_aug: bool,
    pub align_enabled: bool,
    /// Space-to-depth block size used by cross packing attention.
    pub pack_size: usize,
    pub reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            base_channels: 64,
            num_res_blocks: 4,
            scale: 4,
            offset_mode: OffsetMode::Squared,
            attention: AttentionKind::Cpa,
            flip_aug: true,
            align_enabled: true,
            pack_size: 4,
            reduction: 16,
        }
    }
}

const DEFORM_KERNEL: usize = 3;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 && self.in_channels != 4 {
            return Err(SdanError::config(format!(
                "in_channels must be 3 (RGB) or 4 (packed RAW), got {}",
                self.in_channels
            )));
        }
        if self.base_channels == 0 {
            return Err(SdanError::config("base_channels must be positive"));
        }
        if self.scale == 0 || !self.scale.is_power_of_two() {
            return Err(SdanError::config(format!("scale {} is not a power of two", self.scale)));
        }
        if self.pack_size == 0 || self.reduction == 0 {
            return Err(SdanError::config("pack_size and reduction must be positive"));
        }
        let attended = match self.attention {
            AttentionKind::None => None,
            AttentionKind::Channel => Some(2 * self.base_channels),
            AttentionKind::Cpa => Some(2 * self.base_channels * self.pack_size * self.pack_size),
        };
        if let Some(c) = attended {
            let r = crate::attention::effective_reduction(c, self.reduction);
            if c % r != 0 {
                return Err(SdanError::config(format!("{c} channels not divisible by reduction {r}")));
            }
        }
        Ok(())
    }

    pub fn is_raw(&self) -> bool {
        self.in_channels == 4
    }

    /// Number of x2 pixel-shuffle stages.
    pub fn upsample_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize + usize::from(self.is_raw())
    }

    /// Ratio between output and input spatial size.
    pub fn output_factor(&self) -> usize {
        1 << self.upsample_stages()
    }

    /// `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "in_channels = {}\nbase_channels = {}\nnum_res_blocks = {}\nscale = {}\noffset_mode = {}\nattention = {}\nflip_aug = {}\nalign_enabled = {}\npack_size = {}\nreduction = {}\n",
            self.in_channels,
            self.base_channels,
            self.num_res_blocks,
            self.scale,
            self.offset_mode,
            self.attention,
            self.flip_aug,
            self.align_enabled,
            self.pack_size,
            self.reduction
        )
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| SdanError::config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "in_channels" => self.in_channels = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "num_res_blocks" => self.num_res_blocks = parse(key, value)?,
            "scale" => self.scale = parse(key, value)?,
            "offset_mode" => self.offset_mode = value.parse()?,
            "attention" => self.attention = value.parse()?,
            "flip_aug" => self.flip_aug = parse(key, value)?,
            "align_enabled" => self.align_enabled = parse(key, value)?,
            "pack_size" => self.pack_size = parse(key, value)?,
            "reduction" => self.reduction = parse(key, value)?,
            other => return Err(SdanError::config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SdanError::config(format!("malformed line '{line}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every learnable tensor of the network. The same type holds gradients
/// and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SdanParams<T = f32> {
    pub feat: ConvParams<T>,
    pub offset: OffsetHead<T>,
    pub deform: ConvParams<T>,
    pub aligned: ConvParams<T>,
    pub res_blocks: Vec<[ConvParams<T>; 2]>,
    pub upsample: Vec<ConvParams<T>>,
    pub tail: ConvParams<T>,
}

/// A named view onto one parameter tensor.
pub struct NamedSlice<'a, T> {
    pub name: String,
    pub shape: Shape,
    pub data: &'a [T],
}

fn bias_shape(len: usize) -> Shape {
    Shape::new(1, len, 1, 1)
}

impl<T: Real> SdanParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.base_channels;
        let feat = ConvParams::fan_in_uniform(cfg.in_channels, c, 3, &mut rng);
        let attention = match cfg.attention {
            AttentionKind::None => OffsetAttention::None,
            AttentionKind::Channel => OffsetAttention::Channel(AttentionParams::init(2 * c, cfg.reduction, &mut rng)),
            AttentionKind::Cpa => OffsetAttention::Cpa(CpaParams::init(2 * c, cfg.pack_size, cfg.reduction, &mut rng)),
        };
        let offset = OffsetHead::init(c, cfg.offset_mode, attention, DEFORM_KERNEL, &mut rng);
        let deform = ConvParams::fan_in_uniform(c, c, DEFORM_KERNEL, &mut rng);
        let aligned = ConvParams::fan_in_uniform(c, cfg.in_channels, 3, &mut rng);
        let res_blocks = (0..cfg.num_res_blocks)
            .map(|_| {
                [
                    ConvParams::fan_in_uniform(c, c, 3, &mut rng),
                    ConvParams::fan_in_uniform(c, c, 3, &mut rng),
                ]
            })
            .collect();
        let upsample = (0..cfg.upsample_stages())
            .map(|_| ConvParams::fan_in_uniform(c, 4 * c, 3, &mut rng))
            .collect();
        let tail = ConvParams::fan_in_uniform(c, 3, 3, &mut rng);
        Ok(SdanParams {
            feat,
            offset,
            deform,
            aligned,
            res_blocks,
            upsample,
            tail,
        })
    }

    pub fn zeros_like(&self) -> Self {
        SdanParams {
            feat: self.feat.zeros_like(),
            offset: self.offset.zeros_like(),
            deform: self.deform.zeros_like(),
            aligned: self.aligned.zeros_like(),
            res_blocks: self
                .res_blocks
                .iter()
                .map(|[a, b]| [a.zeros_like(), b.zeros_like()])
                .collect(),
            upsample: self.upsample.iter().map(ConvParams::zeros_like).collect(),
            tail: self.tail.zeros_like(),
        }
    }

    fn convs(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut v = vec![
            ("feat".to_string(), &self.feat),
            ("offset.hidden".to_string(), &self.offset.hidden),
            ("offset.output".to_string(), &self.offset.output),
            ("deform".to_string(), &self.deform),
            ("aligned".to_string(), &self.aligned),
        ];
        for (i, [a, b]) in self.res_blocks.iter().enumerate() {
            v.push((format!("res{i}.conv1"), a));
            v.push((format!("res{i}.conv2"), b));
        }
        for (i, u) in self.upsample.iter().enumerate() {
            v.push((format!("up{i}"), u));
        }
        v.push(("tail".to_string(), &self.tail));
        v
    }

    /// All tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<NamedSlice<'_, T>> {
        let mut out = Vec::new();
        for (name, conv) in self.convs() {
            out.push(NamedSlice {
                name: format!("{name}.weight"),
                shape: conv.weight.shape(),
                data: conv.weight.data(),
            });
            out.push(NamedSlice {
                name: format!("{name}.bias"),
                shape: bias_shape(conv.bias.len()),
                data: &conv.bias,
            });
        }
        if let Some(a) = self.offset.attention.attention_params() {
            out.push(NamedSlice {
                name: "offset.attention.fc1".into(),
                shape: a.fc1.shape(),
                data: a.fc1.data(),
            });
            out.push(NamedSlice {
                name: "offset.attention.fc2".into(),
                shape: a.fc2.shape(),
                data: a.fc2.data(),
            });
        }
        out
    }

    /// Mutable slices in the same order as [`SdanParams::named`].
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let SdanParams {
            feat,
            offset,
            deform,
            aligned,
            res_blocks,
            upsample,
            tail,
        } = self;
        let OffsetHead {
            attention,
            hidden,
            output,
            ..
        } = offset;
        let mut convs: Vec<&mut ConvParams<T>> = vec![feat, hidden, output, deform, aligned];
        for [a, b] in res_blocks.iter_mut() {
            convs.push(a);
            convs.push(b);
        }
        convs.extend(upsample.iter_mut());
        convs.push(tail);
        let mut out: Vec<&mut [T]> = Vec::new();
        for conv in convs {
            out.push(conv.weight.data_mut());
            out.push(conv.bias.as_mut_slice());
        }
        if let Some(a) = attention.attention_params_mut() {
            out.push(a.fc1.data_mut());
            out.push(a.fc2.data_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|s| s.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> SdanParams<U> {
        fn conv<T: Real, U: Real>(c: &ConvParams<T>) -> ConvParams<U> {
            ConvParams {
                weight: c.weight.cast(),
                bias: c.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                stride: c.stride,
                pad: c.pad,
            }
        }
        fn att<T: Real, U: Real>(a: &AttentionParams<T>) -> AttentionParams<U> {
            AttentionParams {
                reduction: a.reduction,
                fc1: a.fc1.cast(),
                fc2: a.fc2.cast(),
            }
        }
        SdanParams {
            feat: conv(&self.feat),
            offset: OffsetHead {
                mode: self.offset.mode,
                attention: match &self.offset.attention {
                    OffsetAttention::None => OffsetAttention::None,
                    OffsetAttention::Channel(a) => OffsetAttention::Channel(att(a)),
                    OffsetAttention::Cpa(p) => OffsetAttention::Cpa(CpaParams { k: p.k, inner: att(&p.inner) }),
                },
                hidden: conv(&self.offset.hidden),
                output: conv(&self.offset.output),
            },
            deform: conv(&self.deform),
            aligned: conv(&self.aligned),
            res_blocks: self.res_blocks.iter().map(|[a, b]| [conv(a), conv(b)]).collect(),
            upsample: self.upsample.iter().map(conv).collect(),
            tail: conv(&self.tail),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdanModel<T = f32> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: SdanParams<T>,
}

impl<T: Real> SdanModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = SdanParams::init(&config, seed)?;
        Ok(SdanModel { config, seed, params })
    }
}

/// Everything the network produces for one batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    /// Super-resolved result, `(n, 3, f*h, f*w)`.
    pub zoomed: Tensor<T>,
    /// LR-resolution aligned result, `(n, in_channels, h, w)`.
    pub aligned: Tensor<T>,
    /// Validity mask at output resolution.
    pub mask_hr: ValidityMask<T>,
    /// Validity mask at offset resolution.
    pub mask_lr: ValidityMask<T>,
    pub offsets: OffsetField<T>,
}

/// Intermediates retained for [`backward`].
pub struct ForwardCache<T> {
    input: Tensor<T>,
    f_x: Tensor<T>,
    reference: Option<ReferenceCache<T>>,
    head: Option<OffsetHeadCache<T>>,
    f_aligned: Tensor<T>,
    blocks: Vec<(Tensor<T>, Tensor<T>)>,
    ups: Vec<(Tensor<T>, Tensor<T>)>,
    trunk_out: Tensor<T>,
}

enum ReferenceCache<T> {
    Flip(FlipAugCache<T>),
    Plain { input: Tensor<T>, act: Tensor<T> },
}

pub fn forward<T: Real>(model: &SdanModel<T>, x: &Tensor<T>, yref: &Tensor<T>) -> Result<ForwardOutput<T>> {
    Ok(forward_cached(model, x, yref)?.0)
}

pub fn forward_cached<T: Real>(
    model: &SdanModel<T>,
    x: &Tensor<T>,
    yref: &Tensor<T>,
) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
    let cfg = &model.config;
    let p = &model.params;
    let s = x.shape();
    if s.c != cfg.in_channels {
        return Err(SdanError::dim(format!(
            "model expects {} input channels, got {}",
            cfg.in_channels, s.c
        )));
    }
    if yref.shape() != s {
        return Err(SdanError::dim(format!("reference {} does not match input {s}", yref.shape())));
    }
    let f_x = activation(&conv2d(x, &p.feat)?, Activation::Relu);

    let (offsets, f_aligned, reference, head) = if cfg.align_enabled {
        let (f_y, reference) = if cfg.flip_aug {
            let (f, c) = flip_augmented_reference_forward(yref, &p.feat)?;
            (f, ReferenceCache::Flip(c))
        } else {
            let act = activation(&conv2d(yref, &p.feat)?, Activation::Relu);
            (act.clone(), ReferenceCache::Plain { input: yref.clone(), act })
        };
        let (offsets, head) = offset_head_forward(&f_x, &f_y, &p.offset)?;
        let f_aligned = deform_conv_forward(&f_x, &offsets, &p.deform)?;
        (offsets, f_aligned, Some(reference), Some(head))
    } else {
        let offsets = OffsetField::zeros(cfg.offset_mode, s.n, s.h, s.w, DEFORM_KERNEL);
        (offsets, conv2d(&f_x, &p.deform)?, None, None)
    };

    let aligned = conv2d(&f_aligned, &p.aligned)?;

    let mut t = f_aligned.clone();
    let mut blocks = Vec::with_capacity(p.res_blocks.len());
    for [c1, c2] in &p.res_blocks {
        let h1 = activation(&conv2d(&t, c1)?, Activation::Relu);
        let r = conv2d(&h1, c2)?;
        let next = t.add(&r)?;
        blocks.push((t, h1));
        t = next;
    }
    if !p.res_blocks.is_empty() {
        t.add_assign(&f_aligned)?;
    }
    let mut ups = Vec::with_capacity(p.upsample.len());
    for u in &p.upsample {
        let shuffled = depth_to_space(&conv2d(&t, u)?, 2)?;
        let act = activation(&shuffled, Activation::Relu);
        ups.push((t, act.clone()));
        t = act;
    }
    let zoomed = conv2d(&t, &p.tail)?;

    let mask_lr = validity_mask(&offsets, s.h, s.w);
    let mask_hr = upsample_mask(&mask_lr, cfg.output_factor());
    Ok((
        ForwardOutput {
            zoomed,
            aligned,
            mask_hr,
            mask_lr,
            offsets,
        },
        ForwardCache {
            input: x.clone(),
            f_x,
            reference,
            head,
            f_aligned,
            blocks,
            ups,
            trunk_out: t,
        },
    ))
}

/// `forward(model, X, X).zoomed`: at inference the input is its own reference.
pub fn infer<T: Real>(model: &SdanModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward(model, x, x)?.zoomed)
}

fn accumulate_conv<T: Real>(dst: &mut ConvParams<T>, w: Tensor<T>, b: Vec<T>) -> Result<()> {
    dst.weight.add_assign(&w)?;
    for (a, v) in dst.bias.iter_mut().zip(b) {
        *a += v;
    }
    Ok(())
}

/// Parameter gradients given the gradients of the scalar objective with
/// respect to `zoomed` and `aligned`. Masks are treated as constants.
pub fn backward<T: Real>(
    model: &SdanModel<T>,
    cache: &ForwardCache<T>,
    out: &ForwardOutput<T>,
    grad_zoomed: &Tensor<T>,
    grad_aligned: &Tensor<T>,
) -> Result<SdanParams<T>> {
    let p = &model.params;
    let mut g = p.zeros_like();

    let gt = conv2d_backward(&cache.trunk_out, &p.tail, grad_zoomed)?;
    accumulate_conv(&mut g.tail, gt.weight, gt.bias)?;
    let mut g_t = gt.input;
    for (i, u) in p.upsample.iter().enumerate().rev() {
        let (input, act) = &cache.ups[i];
        let g_shuffled = relu_backward_from_output(act, &g_t)?;
        let g_pre = space_to_depth(&g_shuffled, 2)?;
        let gu = conv2d_backward(input, u, &g_pre)?;
        accumulate_conv(&mut g.upsample[i], gu.weight, gu.bias)?;
        g_t = gu.input;
    }
    let mut g_fa = if p.res_blocks.is_empty() {
        Tensor::zeros(cache.f_aligned.shape())
    } else {
        g_t.clone()
    };
    for (i, [c1, c2]) in p.res_blocks.iter().enumerate().rev() {
        let (input, h1) = &cache.blocks[i];
        let g2 = conv2d_backward(h1, c2, &g_t)?;
        accumulate_conv(&mut g.res_blocks[i][1], g2.weight, g2.bias)?;
        let g_h = relu_backward_from_output(h1, &g2.input)?;
        let g1 = conv2d_backward(input, c1, &g_h)?;
        accumulate_conv(&mut g.res_blocks[i][0], g1.weight, g1.bias)?;
        g_t.add_assign(&g1.input)?;
    }
    g_fa.add_assign(&g_t)?;

    let ga = conv2d_backward(&cache.f_aligned, &p.aligned, grad_aligned)?;
    accumulate_conv(&mut g.aligned, ga.weight, ga.bias)?;
    g_fa.add_assign(&ga.input)?;

    let mut g_fx;
    match (&cache.head, &cache.reference) {
        (Some(head_cache), Some(reference)) => {
            let gd = deform_conv_backward(&cache.f_x, &out.offsets, &p.deform, &g_fa)?;
            accumulate_conv(&mut g.deform, gd.weight, gd.bias)?;
            g_fx = gd.feature;
            let (gx_head, gy_head, g_head) = offset_head_backward(&p.offset, head_cache, &gd.offsets)?;
            g.offset = g_head;
            g_fx.add_assign(&gx_head)?;
            match reference {
                ReferenceCache::Flip(c) => {
                    let (_, gf) = flip_augmented_reference_backward(&p.feat, c, &gy_head)?;
                    accumulate_conv(&mut g.feat, gf.weight, gf.bias)?;
                }
                ReferenceCache::Plain { input, act } => {
                    let g_pre = relu_backward_from_output(act, &gy_head)?;
                    let gf = conv2d_backward(input, &p.feat, &g_pre)?;
                    accumulate_conv(&mut g.feat, gf.weight, gf.bias)?;
                }
            }
        }
        _ => {
            let gd = conv2d_backward(&cache.f_x, &p.deform, &g_fa)?;
            accumulate_conv(&mut g.deform, gd.weight, gd.bias)?;
            g_fx = gd.input;
        }
    }
    let g_pre = relu_backward_from_output(&cache.f_x, &g_fx)?;
    let gf = conv2d_backward(&cache.input, &p.feat, &g_pre)?;
    accumulate_conv(&mut g.feat, gf.weight, gf.bias)?;
    Ok(g)
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_shape(b.shape(), "l1_loss")?;
    if a.shape().is_empty() {
        return Err(SdanError::Undefined("l1_loss of empty tensors".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(sum / a.shape().len() as f64)
}

/// Mean over valid `i` of `|A[F(i)] - B[i]|` where `F` displaces every
/// B-coordinate by `(dy, dx)`; `i` is valid when `F(i)` lands inside A.
/// Fractional displacements read A bilinearly.
pub fn misaligned_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>, shift: (f64, f64)) -> Result<f64> {
    a.expect_shape(b.shape(), "misaligned_l1")?;
    let s = a.shape();
    let (dy, dx) = shift;
    let (hmax, wmax) = ((s.h - 1) as f64, (s.w - 1) as f64);
    let integral = dy.fract() == 0.0 && dx.fract() == 0.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let sy = y as f64 + dy;
                if !(0.0..=hmax).contains(&sy) {
                    continue;
                }
                for x in 0..s.w {
                    let sx = x as f64 + dx;
                    if !(0.0..=wmax).contains(&sx) {
                        continue;
                    }
                    let av = if integral {
                        a.at(n, c, sy as usize, sx as usize)
                    } else {
                        bilinear_sample(a, n, c, T::lit(sy), T::lit(sx))
                    };
                    sum += (av.as_f64() - b.at(n, c, y, x).as_f64()).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(SdanError::Undefined(format!(
            "misaligned_l1: shift ({dy}, {dx}) leaves no overlap"
        )));
    }
    Ok(sum / count as f64)
}

/// The two terms of the mask-weighted loss and their gradients.
#[derive(Debug, Clone)]
pub struct LossTerms<T> {
    pub aligned_term: f64,
    pub zoom_term: f64,
    pub grad_aligned: Tensor<T>,
    pub grad_zoomed: Tensor<T>,
}

impl<T> LossTerms<T> {
    pub fn total(&self) -> f64 {
        self.aligned_term + self.zoom_term
    }
}

fn masked_l1_term<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &ValidityMask<T>) -> Result<(f64, Tensor<T>)> {
    pred.expect_shape(target.shape(), "masked loss target")?;
    let s = pred.shape();
    mask.data.expect_shape(Shape::new(s.n, 1, s.h, s.w), "masked loss mask")?;
    let valid = mask.count_valid() * s.c;
    if valid == 0 {
        return Err(SdanError::Undefined("every pixel is masked out".into()));
    }
    let norm = 1.0 / valid as f64;
    let tnorm = T::lit(norm);
    let mut grad = Tensor::zeros(s);
    let mut sum = 0.0;
    for n in 0..s.n {
        let m = mask.data.plane(n, 0);
        for c in 0..s.c {
            let pp = pred.plane(n, c);
            let tp = target.plane(n, c);
            let gp = grad.plane_mut(n, c);
            for i in 0..s.plane() {
                if m[i] > T::zero() {
                    let d = pp[i] - tp[i];
                    sum += d.as_f64().abs();
                    gp[i] = if d > T::zero() {
                        tnorm
                    } else if d < T::zero() {
                        -tnorm
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
    Ok((sum * norm, grad))
}

/// `mean(|X' - Y'| * M') + mean(|X~ - Y| * M)`, each mean normalised by the
/// number of valid (unmasked) elements.
pub fn masked_zoom_loss<T: Real>(out: &ForwardOutput<T>, y: &Tensor<T>, yref: &Tensor<T>) -> Result<LossTerms<T>> {
    let (aligned_term, grad_aligned) = masked_l1_term(&out.aligned, yref, &out.mask_lr)?;
    let (zoom_term, grad_zoomed) = masked_l1_term(&out.zoomed, y, &out.mask_hr)?;
    Ok(LossTerms {
        aligned_term,
        zoom_term,
        grad_aligned,
        grad_zoomed,
    })
}

/// Loss and full parameter gradient for one batch.
pub fn loss_and_grad<T: Real>(
    model: &SdanModel<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    yref: &Tensor<T>,
) -> Result<(LossTerms<T>, SdanParams<T>)> {
    let (out, cache) = forward_cached(model, x, yref)?;
    let terms = masked_zoom_loss(&out, y, yref)?;
    let grads = backward(model, &cache, &out, &terms.grad_zoomed, &terms.grad_aligned)?;
    Ok((terms, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: usize,
    m: SdanParams<T>,
    v: SdanParams<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &SdanParams<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut SdanParams<T>, grads: &SdanParams<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let lr_zero = c.lr == 0.0;
        let grads = grads.named();
        let ps = params.slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in ps.into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                if !lr_zero {
                    p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                }
            }
        }
    }
}

/// One optimisation step on a batch; returns the loss before the update.
/// A non-finite loss, or a batch left with no valid pixel once training has
/// moved the offsets, is reported as divergence.
pub fn train_step<T: Real>(
    model: &mut SdanModel<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    yref: &Tensor<T>,
    opt: &mut AdamState<T>,
) -> Result<f64> {
    let (terms, grads) = match loss_and_grad(model, x, y, yref) {
        // offsets that pushed every sample off the map after an update
        Err(SdanError::Undefined(_)) if opt.step > 0 => {
            return Err(SdanError::Divergence {
                step: opt.step,
                loss: f64::NAN,
            })
        }
        r => r?,
    };
    let loss = terms.total();
    if !loss.is_finite() {
        return Err(SdanError::Divergence {
            step: opt.step,
            loss,
        });
    }
    opt.update(&mut model.params, &grads);
    Ok(loss)
}
