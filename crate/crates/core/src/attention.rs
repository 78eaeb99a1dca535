//! Offset-learning path: flip-augmented reference features, squeeze-and-
//! excitation channel attention, Cross Packing Attention (pack, attend,
//! unpack) and the convolutional head that emits the offset field.

use rand::Rng;

use crate::conv::{conv2d, conv2d_backward, ConvParams};
use crate::deform::{OffsetField, OffsetMode};
use crate::error::{Result, SdanError};
use crate::ops::{
    concat_channels, depth_to_space, flip, global_avg_pool, global_avg_pool_backward,
    relu_backward_from_output, scale_channels, sigmoid, space_to_depth, split_channels, Activation,
    FlipAxes,
};
use crate::tensor::{Real, Shape, Tensor};

/// Bias-free squeeze-and-excitation weights: `gates = sigmoid(fc2 relu(fc1 pool(F)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub reduction: usize,
    /// `(c / reduction, c, 1, 1)`
    pub fc1: Tensor<T>,
    /// `(c, c / reduction, 1, 1)`
    pub fc2: Tensor<T>,
}

/// Largest reduction `<= requested` that divides `channels` and keeps at
/// least four hidden units (or one, for fewer than four channels).
pub fn effective_reduction(channels: usize, requested: usize) -> usize {
    let min_hidden = channels.clamp(1, 4);
    (1..=requested.max(1))
        .rev()
        .find(|&r| channels.is_multiple_of(r) && channels / r >= min_hidden)
        .unwrap_or(1)
}

impl<T: Real> AttentionParams<T> {
    pub fn new(fc1: Tensor<T>, fc2: Tensor<T>) -> Result<Self> {
        let (s1, s2) = (fc1.shape(), fc2.shape());
        let (hidden, c) = (s1.n, s1.c);
        if hidden == 0 || s1.h != 1 || s1.w != 1 || s2 != Shape::new(c, hidden, 1, 1) {
            return Err(SdanError::config(format!("attention weights {s1} / {s2} are inconsistent")));
        }
        if c % hidden != 0 {
            return Err(SdanError::config(format!(
                "{c} channels not divisible into {hidden} hidden units"
            )));
        }
        Ok(AttentionParams {
            reduction: c / hidden,
            fc1,
            fc2,
        })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let r = effective_reduction(channels, reduction);
        let hidden = channels / r;
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        AttentionParams {
            reduction: r,
            fc1: Tensor::random_uniform(Shape::new(hidden, channels, 1, 1), -b1, b1, rng),
            fc2: Tensor::random_uniform(Shape::new(channels, hidden, 1, 1), -b2, b2, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.shape().c
    }

    pub fn hidden(&self) -> usize {
        self.fc1.shape().n
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            reduction: self.reduction,
            fc1: Tensor::zeros(self.fc1.shape()),
            fc2: Tensor::zeros(self.fc2.shape()),
        }
    }
}

/// Intermediates kept from [`channel_attention_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Tensor<T>,
    pooled: Tensor<T>,
    hidden: Tensor<T>,
    gates: Tensor<T>,
}

impl<T: Real> AttentionCache<T> {
    pub fn gates(&self) -> &Tensor<T> {
        &self.gates
    }
}

fn matvec<T: Real>(w: &Tensor<T>, x: &[T]) -> Vec<T> {
    let (rows, cols) = (w.shape().n, w.shape().c);
    let mut out = vec![T::zero(); rows];
    T::gemm(rows, cols, 1, T::one(), w.data(), false, x, false, T::zero(), &mut out);
    out
}

pub fn channel_attention_forward<T: Real>(
    input: &Tensor<T>,
    p: &AttentionParams<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let s = input.shape();
    if s.c != p.channels() {
        return Err(SdanError::config(format!(
            "attention sized for {} channels applied to {}",
            p.channels(),
            s.c
        )));
    }
    let pooled = global_avg_pool(input)?;
    let mut hidden = Vec::with_capacity(s.n * p.hidden());
    let mut gates = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        let z1 = matvec(&p.fc1, pooled.sample(n));
        let a1: Vec<T> = z1.into_iter().map(|v| v.max(T::zero())).collect();
        let z2 = matvec(&p.fc2, &a1);
        gates.extend(z2.into_iter().map(sigmoid));
        hidden.extend(a1);
    }
    let hidden = Tensor::from_vec(Shape::new(s.n, p.hidden(), 1, 1), hidden)?;
    let gates = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), gates)?;
    let out = scale_channels(input, &gates)?;
    Ok((
        out,
        AttentionCache {
            input: input.clone(),
            pooled,
            hidden,
            gates,
        },
    ))
}

pub fn channel_attention<T: Real>(input: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    Ok(channel_attention_forward(input, p)?.0)
}

/// Returns the input gradient and the weight gradients (as an
/// [`AttentionParams`] holding gradients).
pub fn channel_attention_backward<T: Real>(
    p: &AttentionParams<T>,
    cache: &AttentionCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionParams<T>)> {
    let s = cache.input.shape();
    grad_out.expect_shape(s, "channel_attention_backward")?;
    let (c, hid) = (s.c, p.hidden());
    let mut grads = p.zeros_like();
    let mut g_input = scale_channels(grad_out, &cache.gates)?;
    let mut g_pooled = Vec::with_capacity(s.n * c);
    for n in 0..s.n {
        let g = cache.gates.sample(n);
        let a1 = cache.hidden.sample(n);
        let pooled = cache.pooled.sample(n);
        // d loss / d gate, then through the sigmoid
        let gz2: Vec<T> = (0..c)
            .map(|ch| {
                let dot: T = grad_out
                    .plane(n, ch)
                    .iter()
                    .zip(cache.input.plane(n, ch))
                    .map(|(&a, &b)| a * b)
                    .sum();
                dot * g[ch] * (T::one() - g[ch])
            })
            .collect();
        // fc2 grad += gz2 a1^T
        T::gemm(c, 1, hid, T::one(), &gz2, false, a1, false, T::one(), grads.fc2.data_mut());
        let mut ga1 = vec![T::zero(); hid];
        T::gemm(hid, c, 1, T::one(), p.fc2.data(), true, &gz2, false, T::zero(), &mut ga1);
        for (gv, &av) in ga1.iter_mut().zip(a1) {
            if av <= T::zero() {
                *gv = T::zero();
            }
        }
        T::gemm(hid, 1, c, T::one(), &ga1, false, pooled, false, T::one(), grads.fc1.data_mut());
        let mut gp = vec![T::zero(); c];
        T::gemm(c, hid, 1, T::one(), p.fc1.data(), true, &ga1, false, T::zero(), &mut gp);
        g_pooled.extend(gp);
    }
    let g_pooled = Tensor::from_vec(Shape::new(s.n, c, 1, 1), g_pooled)?;
    g_input.add_assign(&global_avg_pool_backward(s, &g_pooled)?)?;
    Ok((g_input, grads))
}

/// Packing size plus the attention applied to the packed channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CpaParams<T = f32> {
    pub k: usize,
    /// Sized for `c_in * k * k` channels.
    pub inner: AttentionParams<T>,
}

impl<T: Real> CpaParams<T> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, k: usize, reduction: usize, rng: &mut R) -> Self {
        CpaParams {
            k,
            inner: AttentionParams::init(c_in * k * k, reduction, rng),
        }
    }

    fn check(&self, s: Shape) -> Result<()> {
        if self.k == 0 || !s.h.is_multiple_of(self.k) || !s.w.is_multiple_of(self.k) {
            return Err(SdanError::config(format!(
                "packing size {} does not divide {}x{}",
                self.k, s.h, s.w
            )));
        }
        if s.c * self.k * self.k != self.inner.channels() {
            return Err(SdanError::config(format!(
                "CPA attention sized for {} channels, packed input has {}",
                self.inner.channels(),
                s.c * self.k * self.k
            )));
        }
        Ok(())
    }
}

pub fn cross_packing_attention_forward<T: Real>(
    input: &Tensor<T>,
    p: &CpaParams<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    p.check(input.shape())?;
    let packed = space_to_depth(input, p.k)?;
    let (attended, cache) = channel_attention_forward(&packed, &p.inner)?;
    Ok((depth_to_space(&attended, p.k)?, cache))
}

pub fn cross_packing_attention<T: Real>(input: &Tensor<T>, p: &CpaParams<T>) -> Result<Tensor<T>> {
    Ok(cross_packing_attention_forward(input, p)?.0)
}

pub fn cross_packing_attention_backward<T: Real>(
    p: &CpaParams<T>,
    cache: &AttentionCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionParams<T>)> {
    let g_packed = space_to_depth(grad_out, p.k)?;
    let (g_in, grads) = channel_attention_backward(&p.inner, cache, &g_packed)?;
    Ok((depth_to_space(&g_in, p.k)?, grads))
}

/// Per-branch intermediates of [`flip_augmented_reference_forward`].
#[derive(Debug, Clone)]
pub struct FlipAugCache<T> {
    inputs: Vec<Tensor<T>>,
    activations: Vec<Tensor<T>>,
}

/// Mean over the four flips of `unflip(relu(conv(flip(yref))))`, all with
/// the same convolution.
pub fn flip_augmented_reference_forward<T: Real>(
    yref: &Tensor<T>,
    feat: &ConvParams<T>,
) -> Result<(Tensor<T>, FlipAugCache<T>)> {
    let mut inputs = Vec::with_capacity(4);
    let mut activations = Vec::with_capacity(4);
    let mut sum: Option<Tensor<T>> = None;
    for axes in FlipAxes::ALL {
        let x = flip(yref, axes);
        let a = crate::ops::activation(&conv2d(&x, feat)?, Activation::Relu);
        let back = flip(&a, axes);
        match sum.as_mut() {
            Some(acc) => acc.add_assign(&back)?,
            None => sum = Some(back),
        }
        inputs.push(x);
        activations.push(a);
    }
    let quarter = T::lit(0.25);
    let out = sum.expect("four branches").map(|v| v * quarter);
    Ok((
        out,
        FlipAugCache {
            inputs,
            activations,
        },
    ))
}

pub fn flip_augmented_reference<T: Real>(yref: &Tensor<T>, feat: &ConvParams<T>) -> Result<Tensor<T>> {
    Ok(flip_augmented_reference_forward(yref, feat)?.0)
}

/// Returns `(grad_yref, grad_conv)`.
pub fn flip_augmented_reference_backward<T: Real>(
    feat: &ConvParams<T>,
    cache: &FlipAugCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>)> {
    let quarter = T::lit(0.25);
    let mut grads = feat.zeros_like();
    let mut g_yref: Option<Tensor<T>> = None;
    for (i, axes) in FlipAxes::ALL.into_iter().enumerate() {
        let g_branch = flip(grad_out, axes).map(|v| v * quarter);
        let g_pre = relu_backward_from_output(&cache.activations[i], &g_branch)?;
        let cg = conv2d_backward(&cache.inputs[i], feat, &g_pre)?;
        grads.weight.add_assign(&cg.weight)?;
        for (a, b) in grads.bias.iter_mut().zip(&cg.bias) {
            *a += *b;
        }
        let gy = flip(&cg.input, axes);
        match g_yref.as_mut() {
            Some(acc) => acc.add_assign(&gy)?,
            None => g_yref = Some(gy),
        }
    }
    Ok((g_yref.expect("four branches"), grads))
}

/// Attention placed in front of the offset convolutions.
#[derive(Debug, Clone, PartialEq)]
pub enum OffsetAttention<T = f32> {
    None,
    Channel(AttentionParams<T>),
    Cpa(CpaParams<T>),
}

impl<T: Real> OffsetAttention<T> {
    pub fn zeros_like(&self) -> Self {
        match self {
            OffsetAttention::None => OffsetAttention::None,
            OffsetAttention::Channel(p) => OffsetAttention::Channel(p.zeros_like()),
            OffsetAttention::Cpa(p) => OffsetAttention::Cpa(CpaParams {
                k: p.k,
                inner: p.inner.zeros_like(),
            }),
        }
    }

    pub fn attention_params(&self) -> Option<&AttentionParams<T>> {
        match self {
            OffsetAttention::None => None,
            OffsetAttention::Channel(p) => Some(p),
            OffsetAttention::Cpa(p) => Some(&p.inner),
        }
    }

    pub fn attention_params_mut(&mut self) -> Option<&mut AttentionParams<T>> {
        match self {
            OffsetAttention::None => None,
            OffsetAttention::Channel(p) => Some(p),
            OffsetAttention::Cpa(p) => Some(&mut p.inner),
        }
    }
}

/// Attention followed by `conv(2C -> C) -> relu -> conv(C -> offsets)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetHead<T = f32> {
    pub mode: OffsetMode,
    pub attention: OffsetAttention<T>,
    pub hidden: ConvParams<T>,
    pub output: ConvParams<T>,
}

impl<T: Real> OffsetHead<T> {
    /// Fresh head whose last layer is all zeros, so the field starts at zero.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        mode: OffsetMode,
        attention: OffsetAttention<T>,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        OffsetHead {
            mode,
            attention,
            hidden: ConvParams::fan_in_uniform(2 * channels, channels, 3, rng),
            output: ConvParams::zeros(channels, mode.channels(kernel), 3),
        }
    }

    pub fn zeros_like(&self) -> Self {
        OffsetHead {
            mode: self.mode,
            attention: self.attention.zeros_like(),
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OffsetHeadCache<T> {
    c_x: usize,
    concat: Tensor<T>,
    attended: Tensor<T>,
    attention: Option<AttentionCache<T>>,
    hidden: Tensor<T>,
}

pub fn offset_head_forward<T: Real>(
    f_x: &Tensor<T>,
    f_yref: &Tensor<T>,
    head: &OffsetHead<T>,
) -> Result<(OffsetField<T>, OffsetHeadCache<T>)> {
    if f_x.shape() != f_yref.shape() {
        return Err(SdanError::dim(format!(
            "offset head inputs differ: {} vs {}",
            f_x.shape(),
            f_yref.shape()
        )));
    }
    let concat = concat_channels(f_x, f_yref)?;
    let (attended, attention) = match &head.attention {
        OffsetAttention::None => (concat.clone(), None),
        OffsetAttention::Channel(p) => {
            let (a, c) = channel_attention_forward(&concat, p)?;
            (a, Some(c))
        }
        OffsetAttention::Cpa(p) => {
            let (a, c) = cross_packing_attention_forward(&concat, p)?;
            (a, Some(c))
        }
    };
    let hidden = crate::ops::activation(&conv2d(&attended, &head.hidden)?, Activation::Relu);
    let data = conv2d(&hidden, &head.output)?;
    let field = OffsetField::new(head.mode, data)?;
    Ok((
        field,
        OffsetHeadCache {
            c_x: f_x.shape().c,
            concat,
            attended,
            attention,
            hidden,
        },
    ))
}

pub fn offset_head<T: Real>(f_x: &Tensor<T>, f_yref: &Tensor<T>, head: &OffsetHead<T>) -> Result<OffsetField<T>> {
    Ok(offset_head_forward(f_x, f_yref, head)?.0)
}

/// Returns `(grad_f_x, grad_f_yref, head_grads)`.
pub fn offset_head_backward<T: Real>(
    head: &OffsetHead<T>,
    cache: &OffsetHeadCache<T>,
    grad_offsets: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, OffsetHead<T>)> {
    let mut grads = head.zeros_like();
    let g_out = conv2d_backward(&cache.hidden, &head.output, grad_offsets)?;
    grads.output.weight = g_out.weight;
    grads.output.bias = g_out.bias;
    let g_hidden = relu_backward_from_output(&cache.hidden, &g_out.input)?;
    let g_h = conv2d_backward(&cache.attended, &head.hidden, &g_hidden)?;
    grads.hidden.weight = g_h.weight;
    grads.hidden.bias = g_h.bias;
    let g_concat = match (&head.attention, &cache.attention) {
        (OffsetAttention::None, _) => g_h.input,
        (OffsetAttention::Channel(p), Some(c)) => {
            let (g, ga) = channel_attention_backward(p, c, &g_h.input)?;
            grads.attention = OffsetAttention::Channel(ga);
            g
        }
        (OffsetAttention::Cpa(p), Some(c)) => {
            let (g, ga) = cross_packing_attention_backward(p, c, &g_h.input)?;
            grads.attention = OffsetAttention::Cpa(CpaParams { k: p.k, inner: ga });
            g
        }
        _ => return Err(SdanError::config("offset head cache does not match its attention")),
    };
    debug_assert_eq!(g_concat.shape(), cache.concat.shape());
    let (gx, gy) = split_channels(&g_concat, cache.c_x)?;
    Ok((gx, gy, grads))
}
