//! Deformable convolution with squared (one offset per window) or per-point
//! (one offset per tap) sampling, its analytic adjoint, and the validity
//! masks derived from the learned offsets.
//!
//! For output location `p` and kernel tap `t` the layer samples the feature at
//! `p + t + delta`, where `t` ranges over the regular `k x k` grid centred on
//! zero and `delta` is either the window offset at `p` (squared mode) or the
//! tap-specific offset at `p` (per-point mode). Samples are bilinear and any
//! neighbour outside the feature map reads as zero.
//!
//! Offset channel layout: squared mode stores `(dy, dx)` in channels `0, 1`;
//! per-point mode stores tap `t = ky * k + kx` in channels `2t` (dy) and
//! `2t + 1` (dx).

use rayon::prelude::*;

use crate::conv::ConvParams;
use crate::error::{Result, SdanError};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OffsetMode {
    Squared,
    PerPoint,
}

impl OffsetMode {
    /// Offset channels needed for a `k x k` kernel.
    pub fn channels(self, k: usize) -> usize {
        match self {
            OffsetMode::Squared => 2,
            OffsetMode::PerPoint => 2 * k * k,
        }
    }
}

/// Per-location displacement field, in pixels at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T = f32> {
    pub mode: OffsetMode,
    pub data: Tensor<T>,
}

impl<T: Real> OffsetField<T> {
    pub fn new(mode: OffsetMode, data: Tensor<T>) -> Result<Self> {
        let c = data.shape().c;
        let ok = match mode {
            OffsetMode::Squared => c == 2,
            OffsetMode::PerPoint => c >= 2 && c.is_multiple_of(2) && is_square(c / 2),
        };
        if !ok {
            return Err(SdanError::config(format!(
                "{c} offset channels is not valid for {mode:?} mode"
            )));
        }
        Ok(OffsetField { mode, data })
    }

    pub fn zeros(mode: OffsetMode, n: usize, h: usize, w: usize, k: usize) -> Self {
        OffsetField {
            mode,
            data: Tensor::zeros(Shape::new(n, mode.channels(k), h, w)),
        }
    }

    /// A squared field with the same `(dy, dx)` at every location.
    pub fn constant(n: usize, h: usize, w: usize, dy: T, dx: T) -> Self {
        OffsetField {
            mode: OffsetMode::Squared,
            data: Tensor::from_fn(Shape::new(n, 2, h, w), |_, c, _, _| if c == 0 { dy } else { dx }),
        }
    }

    /// Per-point field whose every tap repeats this squared field.
    pub fn broadcast_to_taps(&self, k: usize) -> Result<Self> {
        if self.mode != OffsetMode::Squared {
            return Err(SdanError::config("broadcast_to_taps expects a squared field"));
        }
        let s = self.data.shape();
        let data = Tensor::from_fn(s.with_c(2 * k * k), |n, c, y, x| self.data.at(n, c % 2, y, x));
        Ok(OffsetField {
            mode: OffsetMode::PerPoint,
            data,
        })
    }

    /// Offsets summed over taps (per-point) or unchanged (squared); used to
    /// compare per-point offset gradients against squared ones.
    pub fn sum_over_taps(&self) -> Tensor<T> {
        let s = self.data.shape();
        match self.mode {
            OffsetMode::Squared => self.data.clone(),
            OffsetMode::PerPoint => {
                let taps = s.c / 2;
                Tensor::from_fn(s.with_c(2), |n, c, y, x| {
                    (0..taps).map(|t| self.data.at(n, 2 * t + c, y, x)).sum()
                })
            }
        }
    }

    /// Squared-equivalent `(dy, dx)` per location: the field itself in squared
    /// mode, the mean over taps in per-point mode.
    pub fn center_offsets(&self) -> Tensor<T> {
        let summed = self.sum_over_taps();
        match self.mode {
            OffsetMode::Squared => summed,
            OffsetMode::PerPoint => {
                let taps = T::lit((self.data.shape().c / 2) as f64);
                summed.map(|v| v / taps)
            }
        }
    }

    /// Spatial mean of the centre offsets per batch item, as `(dy, dx)`.
    pub fn mean_offset(&self) -> Vec<(f64, f64)> {
        let c = self.center_offsets();
        let s = c.shape();
        (0..s.n)
            .map(|n| {
                let mean = |ch: usize| {
                    c.plane(n, ch).iter().map(|v| v.as_f64()).sum::<f64>() / s.plane() as f64
                };
                (mean(0), mean(1))
            })
            .collect()
    }
}

fn is_square(v: usize) -> bool {
    let r = (v as f64).sqrt().round() as usize;
    r * r == v
}

/// Bilinear interpolation of plane `(n, c)` at fractional `(y, x)`, reading
/// zero for any neighbour outside the map.
pub fn bilinear_sample<T: Real>(feature: &Tensor<T>, n: usize, c: usize, y: T, x: T) -> T {
    let s = feature.shape();
    let tap = Tap::new(y, x, s.h, s.w);
    tap.value(feature.plane(n, c))
}

/// The four bilinear neighbours of one sampling point.
#[derive(Clone, Copy)]
struct Tap<T> {
    idx: [usize; 4],
    valid: [bool; 4],
    weight: [T; 4],
    /// d weight / d y
    dy: [T; 4],
    /// d weight / d x
    dx: [T; 4],
}

impl<T: Real> Tap<T> {
    #[inline]
    fn new(y: T, x: T, h: usize, w: usize) -> Self {
        // floor() makes exact integers use the right-sided derivative
        let y0 = y.floor();
        let x0 = x.floor();
        let ly = y - y0;
        let lx = x - x0;
        let one = T::one();
        let (hy, hx) = (one - ly, one - lx);
        let weight = [hy * hx, hy * lx, ly * hx, ly * lx];
        let dy = [-hx, -lx, hx, lx];
        let dx = [-hy, hy, -ly, ly];
        let mut idx = [0; 4];
        let mut valid = [false; 4];
        let y0 = y0.to_i64().unwrap_or(i64::MIN / 2);
        let x0 = x0.to_i64().unwrap_or(i64::MIN / 2);
        for (j, (oy, ox)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let (yy, xx) = (y0.saturating_add(oy), x0.saturating_add(ox));
            if yy >= 0 && xx >= 0 && (yy as u64) < h as u64 && (xx as u64) < w as u64 {
                valid[j] = true;
                idx[j] = yy as usize * w + xx as usize;
            }
        }
        Tap {
            idx,
            valid,
            weight,
            dy,
            dx,
        }
    }

    #[inline]
    fn value(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for j in 0..4 {
            if self.valid[j] {
                acc += self.weight[j] * plane[self.idx[j]];
            }
        }
        acc
    }

    #[inline]
    fn gradient(&self, plane: &[T]) -> (T, T) {
        let (mut gy, mut gx) = (T::zero(), T::zero());
        for j in 0..4 {
            if self.valid[j] {
                let v = plane[self.idx[j]];
                gy += self.dy[j] * v;
                gx += self.dx[j] * v;
            }
        }
        (gy, gx)
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], g: T) {
        for j in 0..4 {
            if self.valid[j] {
                plane[self.idx[j]] += self.weight[j] * g;
            }
        }
    }
}

/// Gradients of `sum(grad_out * deform_conv_forward(..))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformGrads<T = f32> {
    pub feature: Tensor<T>,
    pub offsets: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

struct Layout {
    c_in: usize,
    c_out: usize,
    k: usize,
    h: usize,
    w: usize,
}

impl Layout {
    fn check<T: Real>(feature: &Tensor<T>, offsets: &OffsetField<T>, params: &ConvParams<T>) -> Result<Self> {
        params.validate()?;
        let fs = feature.shape();
        let os = offsets.data.shape();
        let k = params.kernel();
        if params.stride != 1 {
            return Err(SdanError::config("deformable convolution requires stride 1"));
        }
        if params.pad != k / 2 {
            return Err(SdanError::config(format!(
                "deformable convolution requires pad {} for kernel {k}",
                k / 2
            )));
        }
        if fs.c != params.c_in() {
            return Err(SdanError::dim(format!(
                "deform conv expects {} channels, got {}",
                params.c_in(),
                fs.c
            )));
        }
        if os.n != fs.n || os.h != fs.h || os.w != fs.w {
            return Err(SdanError::dim(format!(
                "offset field {os} does not match feature {fs}"
            )));
        }
        if os.c != offsets.mode.channels(k) {
            return Err(SdanError::config(format!(
                "{:?} mode with kernel {k} needs {} offset channels, got {}",
                offsets.mode,
                offsets.mode.channels(k),
                os.c
            )));
        }
        Ok(Layout {
            c_in: fs.c,
            c_out: params.c_out(),
            k,
            h: fs.h,
            w: fs.w,
        })
    }

    fn taps(&self) -> usize {
        self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Sampling points for batch item `n`, indexed `[t * hw + p]`.
    fn sampling<T: Real>(&self, offsets: &OffsetField<T>, n: usize) -> Vec<Tap<T>> {
        let half = (self.k / 2) as isize;
        let hw = self.hw();
        let off = offsets.data.sample(n);
        let mut out = Vec::with_capacity(self.taps() * hw);
        for t in 0..self.taps() {
            let ty = (t / self.k) as isize - half;
            let tx = (t % self.k) as isize - half;
            let (cy, cx) = match offsets.mode {
                OffsetMode::Squared => (0, 1),
                OffsetMode::PerPoint => (2 * t, 2 * t + 1),
            };
            for y in 0..self.h {
                for x in 0..self.w {
                    let p = y * self.w + x;
                    let sy = T::lit((y as isize + ty) as f64) + off[cy * hw + p];
                    let sx = T::lit((x as isize + tx) as f64) + off[cx * hw + p];
                    out.push(Tap::new(sy, sx, self.h, self.w));
                }
            }
        }
        out
    }

    fn columns<T: Real>(&self, feature: &[T], taps: &[Tap<T>]) -> Vec<T> {
        let hw = self.hw();
        let mut cols = vec![T::zero(); self.c_in * self.taps() * hw];
        for ci in 0..self.c_in {
            let plane = &feature[ci * hw..(ci + 1) * hw];
            for t in 0..self.taps() {
                let row = (ci * self.taps() + t) * hw;
                for p in 0..hw {
                    cols[row + p] = taps[t * hw + p].value(plane);
                }
            }
        }
        cols
    }
}

pub fn deform_conv_forward<T: Real>(
    feature: &Tensor<T>,
    offsets: &OffsetField<T>,
    params: &ConvParams<T>,
) -> Result<Tensor<T>> {
    let l = Layout::check(feature, offsets, params)?;
    let fs = feature.shape();
    let out_shape = Shape::new(fs.n, l.c_out, l.h, l.w);
    let mut out = Tensor::zeros(out_shape);
    let hw = l.hw();
    if hw == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(out_shape.sample())
        .enumerate()
        .for_each(|(n, dst)| {
            let taps = l.sampling(offsets, n);
            let cols = l.columns(feature.sample(n), &taps);
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(params.bias[o]);
            }
            T::gemm(
                l.c_out,
                l.c_in * l.taps(),
                hw,
                T::one(),
                params.weight.data(),
                false,
                &cols,
                false,
                T::one(),
                dst,
            );
        });
    Ok(out)
}

/// Feature, offset, weight and bias gradients of one batch item.
type SampleGrads<T> = (Vec<T>, Vec<T>, Vec<T>, Vec<T>);

pub fn deform_conv_backward<T: Real>(
    feature: &Tensor<T>,
    offsets: &OffsetField<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<DeformGrads<T>> {
    let l = Layout::check(feature, offsets, params)?;
    let fs = feature.shape();
    grad_out.expect_shape(Shape::new(fs.n, l.c_out, l.h, l.w), "deform_conv_backward grad_out")?;
    let hw = l.hw();
    let rows = l.c_in * l.taps();
    let os = offsets.data.shape();

    let per_sample: Vec<SampleGrads<T>> = (0..fs.n)
        .into_par_iter()
        .map(|n| {
            let src = feature.sample(n);
            let gout = &grad_out.sample(n);
            let taps = l.sampling(offsets, n);
            let cols = l.columns(src, &taps);

            let mut gw = vec![T::zero(); params.weight.shape().len()];
            T::gemm(l.c_out, hw, rows, T::one(), gout, false, &cols, true, T::zero(), &mut gw);
            let gb: Vec<T> = gout.chunks(hw.max(1)).map(|p| p.iter().copied().sum()).collect();

            let mut gcols = cols;
            T::gemm(
                rows,
                l.c_out,
                hw,
                T::one(),
                params.weight.data(),
                true,
                gout,
                false,
                T::zero(),
                &mut gcols,
            );

            let mut gfeat = vec![T::zero(); src.len()];
            let mut goff = vec![T::zero(); os.sample()];
            for ci in 0..l.c_in {
                let plane = &src[ci * hw..(ci + 1) * hw];
                let gplane = &mut gfeat[ci * hw..(ci + 1) * hw];
                for t in 0..l.taps() {
                    let row = &gcols[(ci * l.taps() + t) * hw..(ci * l.taps() + t + 1) * hw];
                    let (cy, cx) = match offsets.mode {
                        OffsetMode::Squared => (0, 1),
                        OffsetMode::PerPoint => (2 * t, 2 * t + 1),
                    };
                    for p in 0..hw {
                        let g = row[p];
                        if g == T::zero() {
                            continue;
                        }
                        let tap = &taps[t * hw + p];
                        tap.scatter(gplane, g);
                        let (dy, dx) = tap.gradient(plane);
                        goff[cy * hw + p] += g * dy;
                        goff[cx * hw + p] += g * dx;
                    }
                }
            }
            (gfeat, goff, gw, gb)
        })
        .collect();

    let mut g_feature = Vec::with_capacity(fs.len());
    let mut g_offsets = Vec::with_capacity(os.len());
    let mut weight = Tensor::zeros(params.weight.shape());
    let mut bias = vec![T::zero(); l.c_out];
    for (gf, go, gw, gb) in per_sample {
        g_feature.extend(gf);
        g_offsets.extend(go);
        for (a, b) in weight.data_mut().iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in bias.iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok(DeformGrads {
        feature: Tensor::from_vec(fs, g_feature)?,
        offsets: Tensor::from_vec(os, g_offsets)?,
        weight,
        bias,
    })
}

/// Binary map of locations whose displaced window centre stays inside the
/// image.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask<T = f32> {
    pub data: Tensor<T>,
}

impl<T: Real> ValidityMask<T> {
    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        ValidityMask {
            data: Tensor::full(Shape::new(n, 1, h, w), T::one()),
        }
    }

    pub fn count_valid(&self) -> usize {
        self.data.data().iter().filter(|&&v| v > T::zero()).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data
            .data()
            .iter()
            .all(|&v| v == T::zero() || v == T::one())
    }

    pub fn shape(&self) -> Shape {
        self.data.shape()
    }
}

/// `mask(p) = 1` iff `p + delta(p)` lies in `[0, h) x [0, w)`. Per-point
/// fields use the mean tap offset as the window displacement.
pub fn validity_mask<T: Real>(offsets: &OffsetField<T>, h: usize, w: usize) -> ValidityMask<T> {
    let centre = offsets.center_offsets();
    let s = centre.shape();
    let (hf, wf) = (T::lit(h as f64), T::lit(w as f64));
    let data = Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
        let py = T::lit(y as f64) + centre.at(n, 0, y, x);
        let px = T::lit(x as f64) + centre.at(n, 1, y, x);
        if py >= T::zero() && py < hf && px >= T::zero() && px < wf {
            T::one()
        } else {
            T::zero()
        }
    });
    ValidityMask { data }
}

/// Nearest-neighbour replication by an integer factor.
pub fn upsample_mask<T: Real>(mask: &ValidityMask<T>, s: usize) -> ValidityMask<T> {
    let m = &mask.data;
    let sh = m.shape();
    let data = Tensor::from_fn(Shape::new(sh.n, sh.c, sh.h * s, sh.w * s), |n, c, y, x| {
        m.at(n, c, y / s, x / s)
    });
    ValidityMask { data }
}
