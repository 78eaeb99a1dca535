//! Finite-difference verification of every backward pass.
//!
//! Each op is wrapped as a scalar objective `sum(G * op(inputs))` with a
//! random fixed `G` (the full model uses its own loss). Analytic gradients
//! are computed at the requested precision; the reference derivative is a
//! fourth-order central difference evaluated in f64. A coordinate whose
//! difference quotients at `h` and `h/2` disagree sits on a kink (relu,
//! bilinear cell edge, mask boundary) and is skipped rather than scored.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_attention_backward, channel_attention_forward, cross_packing_attention_backward,
    cross_packing_attention_forward, effective_reduction, flip_augmented_reference_backward,
    flip_augmented_reference_forward, offset_head_backward, offset_head_forward, AttentionParams,
    CpaParams, OffsetAttention, OffsetHead,
};
use crate::conv::{conv2d, conv2d_backward, ConvParams};
use crate::deform::{deform_conv_backward, deform_conv_forward, OffsetField, OffsetMode};
use crate::error::{Result, SdanError};
use crate::model::{backward, forward, forward_cached, masked_zoom_loss, AttentionKind, ModelConfig, SdanModel};
use crate::ops::{
    activation, activation_backward, concat_channels, depth_to_space, flip, global_avg_pool,
    global_avg_pool_backward, space_to_depth, split_channels, Activation, FlipAxes,
};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-4,
            Precision::F64 => 1e-6,
        }
    }

    /// Fraction of a tensor's largest gradient below which entries are
    /// scored against that fraction rather than their own size.
    fn relative_floor(self) -> f64 {
        match self {
            Precision::F32 => 1e-2,
            Precision::F64 => 1e-3,
        }
    }

    /// Fraction of the largest gradient over all tensors of a case. Rounding
    /// in the backward pass scales with the whole objective, so a tensor
    /// whose gradients are all tiny cannot be more accurate than this.
    fn case_floor(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }
}

/// Every checkable op, in report order.
pub const OPS: [&str; 15] = [
    "conv2d",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "concat",
    "space_to_depth",
    "depth_to_space",
    "flip",
    "channel_attention",
    "cpa",
    "flip_aug",
    "offset_head",
    "deform_conv_squared",
    "deform_conv_per_point",
    "model_loss",
];

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub precision: Precision,
    pub trials: usize,
    pub seed: u64,
    /// Run only ops whose name starts with this.
    pub filter: Option<String>,
    /// Test hook: corrupt the weight gradient of ops starting with this.
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            precision: Precision::F32,
            trials: 100,
            seed: 0,
            filter: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    /// Within tolerance, and kinks did not swallow most coordinates.
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.skipped <= self.checked && self.max_rel_err <= self.tolerance
    }
}

pub fn matching_ops(filter: Option<&str>) -> Result<Vec<&'static str>> {
    let ops: Vec<&'static str> = OPS
        .iter()
        .copied()
        .filter(|op| filter.is_none_or(|f| op.starts_with(f)))
        .collect();
    if ops.is_empty() {
        return Err(SdanError::config(format!(
            "no gradcheck op matches '{}' (known: {})",
            filter.unwrap_or(""),
            OPS.join(", ")
        )));
    }
    Ok(ops)
}

pub fn run(cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    matching_ops(cfg.filter.as_deref())?
        .into_iter()
        .map(|op| {
            // stream keyed by the op itself so filtering does not reseed
            let index = OPS.iter().position(|o| *o == op).expect("op comes from OPS");
            check_op(op, index as u64, cfg)
        })
        .collect()
}

type Grads = Vec<Vec<f64>>;
type EvalFn = Box<dyn Fn(&[Vec<f64>], Precision, bool) -> Result<(f64, Option<Grads>)>>;

struct Case {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
    h: f64,
    /// Explicit `(tensor, index)` coordinates; otherwise a random subset.
    coords: Option<Vec<(usize, usize)>>,
    eval: EvalFn,
}

const COORDS_PER_TENSOR: usize = 6;
const MODEL_COORDS: usize = 24;

/// Relative disagreement between the `h` and `h/2` differences above which
/// a kink lies inside the stencil. The differences are always taken in f64,
/// so this does not depend on the precision under test.
const KINK_TOLERANCE: f64 = 1e-7;

macro_rules! dispatch {
    ($f:ident, $spec:expr) => {{
        let spec = $spec;
        Box::new(move |v: &[Vec<f64>], p: Precision, need: bool| match p {
            Precision::F32 => $f::<f32>(&spec, v, need),
            Precision::F64 => $f::<f64>(&spec, v, need),
        }) as EvalFn
    }};
}

fn check_op(op: &'static str, op_index: u64, cfg: &GradcheckConfig) -> Result<OpReport> {
    let mut report = OpReport {
        op,
        trials: cfg.trials,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        tolerance: cfg.precision.tolerance(),
    };
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((op_index << 32) | trial as u64);
        let mut case = build_case(op, trial, &mut rng)?;
        if cfg.precision == Precision::F32 {
            // both sides then see the same inputs
            for v in case.values.iter_mut().flatten() {
                *v = *v as f32 as f64;
            }
        }
        let (_, grads) = (case.eval)(&case.values, cfg.precision, true)?;
        let mut grads = grads.expect("analytic gradients requested");
        if cfg.fault.as_deref().is_some_and(|f| op.starts_with(f)) {
            let w = case.names.iter().position(|n| n == "weight" || n.ends_with(".weight")).unwrap_or(0);
            grads[w].iter_mut().for_each(|g| *g = *g * 1.05 + 1e-3);
        }
        let coords = match &case.coords {
            Some(c) => c.clone(),
            None => {
                let mut c = Vec::new();
                for (t, v) in case.values.iter().enumerate() {
                    let k = v.len().min(COORDS_PER_TENSOR);
                    c.extend(sample(&mut rng, v.len(), k).into_iter().map(|i| (t, i)));
                }
                c
            }
        };
        let scales: Vec<f64> = grads
            .iter()
            .map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();
        let case_scale = scales.iter().fold(0.0f64, |m, &v| m.max(v));
        for (t, i) in coords {
            let floor = (cfg.precision.relative_floor() * scales[t])
                .max(cfg.precision.case_floor() * case_scale)
                .max(1e-12);
            let coarse = central_difference(&case, t, i, case.h)?;
            let fine = central_difference(&case, t, i, case.h / 2.0)?;
            if (coarse - fine).abs() > KINK_TOLERANCE * coarse.abs().max(fine.abs()).max(floor) {
                report.skipped += 1;
                continue;
            }
            let a = grads[t][i];
            let err = (a - fine).abs() / a.abs().max(fine.abs()).max(floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    Ok(report)
}

/// Fourth-order central difference of the objective along one coordinate.
fn central_difference(case: &Case, t: usize, i: usize, h: f64) -> Result<f64> {
    let mut v = case.values.clone();
    let x0 = v[t][i];
    let mut f = |dx: f64| -> Result<f64> {
        v[t][i] = x0 + dx;
        Ok((case.eval)(&v, Precision::F64, false)?.0)
    };
    let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor<T: Real>(shape: Shape, v: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, v.iter().map(|&x| T::lit(x)).collect()).expect("length matches shape")
}

fn values<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn lits<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn f64s<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// Objective `sum(G * out)` in f64.
fn weighted<T: Real>(out: &Tensor<T>, g: &[f64]) -> f64 {
    out.data().iter().zip(g).map(|(o, g)| o.as_f64() * g).sum()
}

#[derive(Clone)]
struct ConvSpec {
    input: Shape,
    weight: Shape,
    stride: usize,
    pad: usize,
    g: Vec<f64>,
}

fn conv_params<T: Real>(weight: Shape, w: &[f64], b: &[f64], stride: usize, pad: usize) -> Result<ConvParams<T>> {
    ConvParams::new(tensor(weight, w), lits(b), stride, pad)
}

fn eval_conv<T: Real>(s: &ConvSpec, v: &[Vec<f64>], need: bool) -> Result<(f64, Option<Grads>)> {
    let x = tensor::<T>(s.input, &v[0]);
    let p = conv_params(s.weight, &v[1], &v[2], s.stride, s.pad)?;
    let out = conv2d(&x, &p)?;
    let obj = weighted(&out, &s.g);
    if !need {
        return Ok((obj, None));
    }
    let g = conv2d_backward(&x, &p, &tensor(out.shape(), &s.g))?;
    Ok((obj, Some(vec![values(&g.input), values(&g.weight), f64s(&g.bias)])))
}

#[derive(Clone)]
struct UnarySpec {
    input: Shape,
    g: Vec<f64>,
    op: Unary,
}

#[derive(Clone, Copy)]
enum Unary {
    Act(Activation),
    Pool,
    Pack(usize),
    Unpack(usize),
    Flip(FlipAxes),
}

fn eval_unary<T: Real>(s: &UnarySpec, v: &[Vec<f64>], need: bool) -> Result<(f64, Option<Grads>)> {
    let x = tensor::<T>(s.input, &v[0]);
    let out = match s.op {
        Unary::Act(a) => activation(&x, a),
        Unary::Pool => global_avg_pool(&x)?,
        Unary::Pack(k) => space_to_depth(&x, k)?,
        Unary::Unpack(k) => depth_to_space(&x, k)?,
        Unary::Flip(axes) => flip(&x, axes),
    };
    let obj = weighted(&out, &s.g);
    if !need {
        return Ok((obj, None));
    }
    let g = tensor::<T>(out.shape(), &s.g);
    let gx = match s.op {
        Unary::Act(a) => activation_backward(&x, &g, a)?,
        Unary::Pool => global_avg_pool_backward(s.input, &g)?,
        Unary::Pack(k) => depth_to_space(&g, k)?,
        Unary::Unpack(k) => space_to_depth(&g, k)?,
        Unary::Flip(axes) => flip(&g, axes),
    };
    Ok((obj, Some(vec![values(&gx)])))
}

#[derive(Clone)]
struct ConcatSpec {
    a: Shape,
    b: Shape,
    g: Vec<f64>,
}

fn eval_concat<T: Real>(s: &ConcatSpec, v: &[Vec<f64>], need: bool) -> Result<(f64, Option<Grads>)> {
    let out = concat_channels(&tensor::<T>(s.a, &v[0]), &tensor::<T>(s.b, &v[1]))?;
    let obj = weighted(&out, &s.g);
    if !need {
        return Ok((obj, None));
    }
    let (ga, gb) = split_channels(&tensor::<T>(out.shape(), &s.g), s.a.c)?;
    Ok((obj, Some(vec![values(&ga), values(&gb)])))
}

#[derive(Clone)]
struct AttentionSpec {
    input: Shape,
    fc1: Shape,
    fc2: Shape,
    reduction: usize,
    /// Packing size for CPA, `None` for plain channel attention.
    pack: Option<usize>,
    g: Vec<f64>,
}

fn eval_attention<T: Real>(s: &AttentionSpec, v: &[Vec<f64>], need: bool) -> Result<(f64, Option<Grads>)> {
    let x = tensor::<T>(s.input, &v[0]);
    let inner = AttentionParams {
        reduction: s.reduction,
        fc1: tensor(s.fc1, &v[1]),
        fc2: tensor(s.fc2, &v[2]),
    };
    let (out, cache, cpa) = match s.pack {
        None => {
            let (o, c) = channel_attention_forward(&x, &inner)?;
            (o, c, None)
        }
        Some(k) => {
            let p = CpaParams { k, inner: inner.clone() };
            let (o, c) = cross_packing_attention_forward(&x, &p)?;
            (o, c, Some(p))
        }
    };
    let obj = weighted(&out, &s.g);
    if !need {
        return Ok((obj, None));
    }
    let g = tensor::<T>(out.shape(), &s.g);
    let (gx, gp) = match &cpa {
        None => channel_attention_backward(&inner, &cache, &g)?,
        Some(p) => cross_packing_attention_backward(p, &cache, &g)?,
    };
    Ok((obj, Some(vec![values(&gx), values(&gp.fc1), values(&gp.fc2)])))
}

#[derive(Clone)]
struct FlipAugSpec {
    input: Shape,
    weight: Shape,
    g: Vec<f64>,
}

fn eval_flip_aug<T: Real>(s: &FlipAugSpec, v: &[Vec<f64>], need: bool) -> Result<(f64, Option<Grads>)> {
    let y = tensor::<T>(s.input, &v[0]);
    let p = conv_params(s.weight, &v[1], &v[2], 1, s.weight.h / 2)?;
    let (out, cache) = flip_augmented_reference_forward(&y, &p)?;
    let obj = weighted(&out, &s.g);
    if !need {
        return Ok((obj, None));
    }
    let (gy, gp) = flip_augmented_reference_backward(&p, &cache, &tensor(out.shape(), &s.g))?;
    Ok((obj, Some(vec![values(&gy), values(&gp.weight), f64s(&gp.bias)])))
}

#[derive(Clone)]
struct HeadSpec {
    feature: Shape,
    mode: OffsetMode,
    attention: AttentionKind,
    pack: usize,
    reduction: usize,
    fc1: Shape,
    fc2: Shape,
    hidden: Shape,
    output: Shape,
    g: Vec<f64>,
}

fn eval_head<T: Real>(s: &HeadSpec, v: &[Vec<f64>], need: bool) -> Result<(f64, Option<Grads>)> {
    let fx = tensor::<T>(s.feature, &v[0]);
    let fy = tensor::<T>(s.feature, &v[1]);
    let inner = || AttentionParams {
        reduction: s.reduction,
        fc1: tensor(s.fc1, &v[6]),
        fc2: tensor(s.fc2, &v[7]),
    };
    let head = OffsetHead {
        mode: s.mode,
        attention: match s.attention {
            AttentionKind::None => OffsetAttention::None,
            AttentionKind::Channel => OffsetAttention::Channel(inner()),
            AttentionKind::Cpa => OffsetAttention::Cpa(CpaParams { k: s.pack, inner: inner() }),
        },
        hidden: conv_params(s.hidden, &v[2], &v[3], 1, 1)?,
        output: conv_params(s.output, &v[4], &v[5], 1, 1)?,
    };
    let (out, cache) = offset_head_forward(&fx, &fy, &head)?;
    let obj = weighted(&out.data, &s.g);
    if !need {
        return Ok((obj, None));
    }
    let (gx, gy, gh) = offset_head_backward(&head, &cache, &tensor(out.data.shape(), &s.g))?;
    let mut grads = vec![
        values(&gx),
        values(&gy),
        values(&gh.hidden.weight),
        f64s(&gh.hidden.bias),
        values(&gh.output.weight),
        f64s(&gh.output.bias),
    ];
    if let Some(a) = gh.attention.attention_params() {
        grads.push(values(&a.fc1));
        grads.push(values(&a.fc2));
    }
    Ok((obj, Some(grads)))
}

#[derive(Clone)]
struct DeformSpec {
    feature: Shape,
    offsets: Shape,
    mode: OffsetMode,
    weight: Shape,
    g: Vec<f64>,
}

fn eval_deform<T: Real>(s: &DeformSpec, v: &[Vec<f64>], need: bool) -> Result<(f64, Option<Grads>)> {
    let f = tensor::<T>(s.feature, &v[0]);
    let off = OffsetField::new(s.mode, tensor(s.offsets, &v[1]))?;
    let p = conv_params(s.weight, &v[2], &v[3], 1, s.weight.h / 2)?;
    let out = deform_conv_forward(&f, &off, &p)?;
    let obj = weighted(&out, &s.g);
    if !need {
        return Ok((obj, None));
    }
    let g = deform_conv_backward(&f, &off, &p, &tensor(out.shape(), &s.g))?;
    Ok((
        obj,
        Some(vec![values(&g.feature), values(&g.offsets), values(&g.weight), f64s(&g.bias)]),
    ))
}

#[derive(Clone)]
struct ModelSpec {
    config: ModelConfig,
    x: Vec<f64>,
    yref: Vec<f64>,
    lr_shape: Shape,
    /// Loss gradients at the unperturbed parameters. Holding them fixed
    /// removes the L1 kinks of every pixel residual from the objective.
    grad_zoomed: Tensor<f64>,
    grad_aligned: Tensor<f64>,
}

fn load_params<T: Real>(config: &ModelConfig, v: &[Vec<f64>]) -> Result<SdanModel<T>> {
    let mut model = SdanModel::<T>::new(config.clone(), 0)?;
    for (dst, src) in model.params.slices_mut().into_iter().zip(v) {
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = T::lit(x);
        }
    }
    Ok(model)
}

fn eval_model<T: Real>(s: &ModelSpec, v: &[Vec<f64>], need: bool) -> Result<(f64, Option<Grads>)> {
    let model = load_params::<T>(&s.config, v)?;
    let x = tensor::<T>(s.lr_shape, &s.x);
    let yref = tensor::<T>(s.lr_shape, &s.yref);
    let (out, cache) = forward_cached(&model, &x, &yref)?;
    let obj = weighted(&out.zoomed, s.grad_zoomed.data()) + weighted(&out.aligned, s.grad_aligned.data());
    if !need {
        return Ok((obj, None));
    }
    let g = backward(&model, &cache, &out, &s.grad_zoomed.cast(), &s.grad_aligned.cast())?;
    Ok((obj, Some(g.named().iter().map(|n| f64s(n.data)).collect())))
}

/// Away from relu's kink at zero.
fn off_zero(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Offsets whose fractional parts stay in `[0.25, 0.75]`, so sampling
/// points sit well inside a bilinear cell.
fn dithered_offsets(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.gen_range(-2i32..=2) as f64 + rng.gen_range(0.25..0.75))
        .collect()
}

fn build_case(op: &'static str, trial: usize, rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.gen_range(1..=2);
    Ok(match op {
        "conv2d" => {
            let (spec, v) = loop {
                let k = [1, 3, 5][rng.gen_range(0..3)];
                let stride = rng.gen_range(1..=2);
                let pad = rng.gen_range(0..=k / 2);
                let (h, w) = (rng.gen_range(k..=9), rng.gen_range(k..=9));
                let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
                let weight = Shape::new(cout, cin, k, k);
                let probe = ConvParams::<f64>::zeros(cin, cout, k);
                let probe = ConvParams { stride, pad, ..probe };
                if let Ok((oh, ow)) = probe.output_hw(h, w) {
                    let input = Shape::new(n, cin, h, w);
                    let g = uniform(rng, n * cout * oh * ow, -1.0, 1.0);
                    let v = vec![
                        uniform(rng, input.len(), -1.0, 1.0),
                        uniform(rng, weight.len(), -1.0, 1.0),
                        uniform(rng, cout, -1.0, 1.0),
                    ];
                    break (ConvSpec { input, weight, stride, pad, g }, v);
                }
            };
            Case {
                names: names(&["input", "weight", "bias"]),
                values: v,
                h: 1e-3,
                coords: None,
                eval: dispatch!(eval_conv, spec),
            }
        }
        "relu" | "sigmoid" | "global_avg_pool" | "space_to_depth" | "depth_to_space" | "flip" => {
            let k = 2;
            let c = rng.gen_range(1..=3);
            let (h, w) = (k * rng.gen_range(1..=4), k * rng.gen_range(1..=4));
            let (input, op_kind, out_len) = match op {
                "relu" => (Shape::new(n, c, h, w), Unary::Act(Activation::Relu), n * c * h * w),
                "sigmoid" => (Shape::new(n, c, h, w), Unary::Act(Activation::Sigmoid), n * c * h * w),
                "global_avg_pool" => (Shape::new(n, c, h, w), Unary::Pool, n * c),
                "space_to_depth" => (Shape::new(n, c, h, w), Unary::Pack(k), n * c * h * w),
                "depth_to_space" => (Shape::new(n, c * k * k, h / k, w / k), Unary::Unpack(k), n * c * h * w),
                _ => (Shape::new(n, c, h, w), Unary::Flip(FlipAxes::ALL[trial % 4]), n * c * h * w),
            };
            let x = if op == "relu" {
                off_zero(rng, input.len())
            } else {
                uniform(rng, input.len(), -2.0, 2.0)
            };
            let spec = UnarySpec {
                input,
                g: uniform(rng, out_len, -1.0, 1.0),
                op: op_kind,
            };
            Case {
                names: names(&["input"]),
                values: vec![x],
                h: 1e-3,
                coords: None,
                eval: dispatch!(eval_unary, spec),
            }
        }
        "concat" => {
            let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
            let a = Shape::new(n, rng.gen_range(1..=3), h, w);
            let b = Shape::new(n, rng.gen_range(1..=3), h, w);
            let spec = ConcatSpec {
                a,
                b,
                g: uniform(rng, n * (a.c + b.c) * h * w, -1.0, 1.0),
            };
            Case {
                names: names(&["a", "b"]),
                values: vec![uniform(rng, a.len(), -1.0, 1.0), uniform(rng, b.len(), -1.0, 1.0)],
                h: 1e-3,
                coords: None,
                eval: dispatch!(eval_concat, spec),
            }
        }
        "channel_attention" | "cpa" => {
            let pack = (op == "cpa").then_some(2);
            let c = match pack {
                Some(_) => rng.gen_range(1..=4),
                None => [4, 8, 16][rng.gen_range(0..3)],
            };
            let packed_c = c * pack.map_or(1, |k| k * k);
            let requested = [2, 4, 16][rng.gen_range(0..3)];
            let r = effective_reduction(packed_c, requested);
            let hid = packed_c / r;
            let k = pack.unwrap_or(1);
            let input = Shape::new(n, c, k * rng.gen_range(1..=3), k * rng.gen_range(1..=3));
            let (fc1, fc2) = (Shape::new(hid, packed_c, 1, 1), Shape::new(packed_c, hid, 1, 1));
            let spec = AttentionSpec {
                input,
                fc1,
                fc2,
                reduction: r,
                pack,
                g: uniform(rng, input.len(), -1.0, 1.0),
            };
            Case {
                names: names(&["input", "weight", "fc2"]),
                values: vec![
                    uniform(rng, input.len(), -1.0, 1.0),
                    uniform(rng, fc1.len(), -1.5, 1.5),
                    uniform(rng, fc2.len(), -1.5, 1.5),
                ],
                h: 1e-3,
                coords: None,
                eval: dispatch!(eval_attention, spec),
            }
        }
        "flip_aug" => {
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let input = Shape::new(n, cin, rng.gen_range(3..=7), rng.gen_range(3..=7));
            let weight = Shape::new(cout, cin, 3, 3);
            let spec = FlipAugSpec {
                input,
                weight,
                g: uniform(rng, n * cout * input.h * input.w, -1.0, 1.0),
            };
            Case {
                names: names(&["input", "weight", "bias"]),
                values: vec![
                    uniform(rng, input.len(), -1.0, 1.0),
                    uniform(rng, weight.len(), -1.0, 1.0),
                    uniform(rng, cout, -0.5, 0.5),
                ],
                h: 1e-3,
                coords: None,
                eval: dispatch!(eval_flip_aug, spec),
            }
        }
        "offset_head" => {
            let c = rng.gen_range(1..=3);
            let pack = 2;
            let feature = Shape::new(n, c, 2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3));
            let attention = [AttentionKind::Cpa, AttentionKind::Channel, AttentionKind::None][trial % 3];
            let mode = [OffsetMode::Squared, OffsetMode::PerPoint][(trial / 3) % 2];
            let att_c = match attention {
                AttentionKind::Cpa => 2 * c * pack * pack,
                _ => 2 * c,
            };
            let r = effective_reduction(att_c, 4);
            let hid = att_c / r;
            let (fc1, fc2) = (Shape::new(hid, att_c, 1, 1), Shape::new(att_c, hid, 1, 1));
            let hidden = Shape::new(c, 2 * c, 3, 3);
            let output = Shape::new(mode.channels(3), c, 3, 3);
            let spec = HeadSpec {
                feature,
                mode,
                attention,
                pack,
                reduction: r,
                fc1,
                fc2,
                hidden,
                output,
                g: uniform(rng, n * output.n * feature.h * feature.w, -1.0, 1.0),
            };
            let mut values = vec![
                uniform(rng, feature.len(), 0.0, 1.0),
                uniform(rng, feature.len(), 0.0, 1.0),
                uniform(rng, hidden.len(), -0.5, 0.5),
                uniform(rng, c, -0.2, 0.2),
                uniform(rng, output.len(), -0.5, 0.5),
                uniform(rng, output.n, -0.5, 0.5),
                uniform(rng, fc1.len(), -1.0, 1.0),
                uniform(rng, fc2.len(), -1.0, 1.0),
            ];
            let mut names = names(&["f_x", "f_yref", "hidden", "hidden_bias", "weight", "output_bias", "fc1", "fc2"]);
            if attention == AttentionKind::None {
                values.truncate(6);
                names.truncate(6);
            }
            Case {
                names,
                values,
                h: 1e-3,
                coords: None,
                eval: dispatch!(eval_head, spec),
            }
        }
        "deform_conv_squared" | "deform_conv_per_point" => {
            let mode = if op == "deform_conv_squared" {
                OffsetMode::Squared
            } else {
                OffsetMode::PerPoint
            };
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            let feature = Shape::new(n, cin, h, w);
            let offsets = Shape::new(n, mode.channels(k), h, w);
            let weight = Shape::new(cout, cin, k, k);
            let spec = DeformSpec {
                feature,
                offsets,
                mode,
                weight,
                g: uniform(rng, n * cout * h * w, -1.0, 1.0),
            };
            Case {
                names: names(&["feature", "offsets", "weight", "bias"]),
                values: vec![
                    uniform(rng, feature.len(), -1.0, 1.0),
                    dithered_offsets(rng, offsets.len()),
                    uniform(rng, weight.len(), -1.0, 1.0),
                    uniform(rng, cout, -1.0, 1.0),
                ],
                h: 1e-3,
                coords: None,
                eval: dispatch!(eval_deform, spec),
            }
        }
        "model_loss" => model_case(trial, rng)?,
        other => return Err(SdanError::config(format!("unknown gradcheck op '{other}'"))),
    })
}

fn model_case(trial: usize, rng: &mut ChaCha8Rng) -> Result<Case> {
    let config = ModelConfig {
        in_channels: 3,
        base_channels: 8,
        num_res_blocks: 1,
        scale: 2,
        offset_mode: [OffsetMode::Squared, OffsetMode::PerPoint][(trial / 3) % 2],
        attention: [AttentionKind::Cpa, AttentionKind::Channel, AttentionKind::None][trial % 3],
        flip_aug: trial.is_multiple_of(2),
        align_enabled: true,
        pack_size: 2,
        reduction: 16,
    };
    let mut model = SdanModel::<f64>::new(config.clone(), rng.gen())?;
    // a non-zero offset field exercises the bilinear and mask paths
    let out_w = &mut model.params.offset.output;
    *out_w = ConvParams::new(
        Tensor::random_uniform(out_w.weight.shape(), -0.1, 0.1, rng),
        uniform(rng, out_w.bias.len(), -1.5, 1.5),
        1,
        1,
    )?;
    let values: Vec<Vec<f64>> = model.params.named().iter().map(|n| n.data.to_vec()).collect();
    let lr_shape = Shape::new(rng.gen_range(1..=2), 3, 8, 8);
    let hr_shape = Shape::new(lr_shape.n, 3, 16, 16);
    let x = Tensor::random_uniform(lr_shape, 0.0, 1.0, rng);
    let y = Tensor::random_uniform(hr_shape, 0.0, 1.0, rng);
    let yref = Tensor::random_uniform(lr_shape, 0.0, 1.0, rng);
    let terms = masked_zoom_loss(&forward(&model, &x, &yref)?, &y, &yref)?;
    let spec = ModelSpec {
        config,
        x: x.data().to_vec(),
        yref: yref.data().to_vec(),
        lr_shape,
        grad_zoomed: terms.grad_zoomed,
        grad_aligned: terms.grad_aligned,
    };
    let coords = (0..MODEL_COORDS)
        .map(|_| {
            let t = rng.gen_range(0..values.len());
            (t, rng.gen_range(0..values[t].len()))
        })
        .collect();
    Ok(Case {
        names: model.params.named().iter().map(|n| n.name.clone()).collect(),
        values,
        h: 1e-4,
        coords: Some(coords),
        eval: dispatch!(eval_model, spec),
    })
}
