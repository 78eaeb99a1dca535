//! Zero-padded 2-D convolution via im2col + GEMM, and its adjoint.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Result, SdanError};
use crate::tensor::{Real, Shape, Tensor};

/// Weights and geometry of one convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(c_out, c_in, k, k)`
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub pad: usize,
}

/// Gradients of a scalar objective with respect to a convolution's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>, stride: usize, pad: usize) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            pad,
        };
        p.validate()?;
        Ok(p)
    }

    /// Stride 1, "same" padding, all-zero weights.
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(Shape::new(c_out, c_in, k, k)),
            bias: vec![T::zero(); c_out],
            stride: 1,
            pad: k / 2,
        }
    }

    /// Stride 1, "same" padding, weights and bias drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = Tensor::random_uniform(Shape::new(c_out, c_in, k, k), -bound, bound, rng);
        let bias = (0..c_out)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        ConvParams {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    /// Delta kernel: output channel `o` copies input channel `o`.
    pub fn identity(channels: usize, k: usize) -> Self {
        let mut p = Self::zeros(channels, channels, k);
        for c in 0..channels {
            p.weight.set(c, c, k / 2, k / 2, T::one());
        }
        p
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.h != s.w {
            return Err(SdanError::config(format!("kernel must be square, got {}x{}", s.h, s.w)));
        }
        if s.h.is_multiple_of(2) {
            return Err(SdanError::config(format!("kernel size {} is not odd", s.h)));
        }
        if self.stride == 0 {
            return Err(SdanError::config("stride must be positive"));
        }
        if self.bias.len() != s.n {
            return Err(SdanError::config(format!(
                "bias length {} != c_out {}",
                self.bias.len(),
                s.n
            )));
        }
        Ok(())
    }

    /// Output spatial size, requiring exact division.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let out = |len: usize| -> Result<usize> {
            let padded = len + 2 * self.pad;
            if padded < k || !(padded - k).is_multiple_of(self.stride) {
                return Err(SdanError::dim(format!(
                    "input extent {len} with pad {} and kernel {k} is not divisible by stride {}",
                    self.pad, self.stride
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((out(h)?, out(w)?))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.c_in() {
            return Err(SdanError::dim(format!(
                "conv expects {} input channels, got {}",
                self.c_in(),
                input.c
            )));
        }
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.c_out(), h, w))
    }

    /// Zeroed gradient container for these parameters.
    pub fn zeros_like(&self) -> Self {
        ConvParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: vec![T::zero(); self.bias.len()],
            stride: self.stride,
            pad: self.pad,
        }
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(input: &[T], g: &Geometry, cols: &mut [T]) {
    let hw = g.cols();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, out: &mut [T]) {
    let hw = g.cols();
    for ci in 0..g.c_in {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Real>(input: Shape, params: &ConvParams<T>) -> Result<(Geometry, Shape)> {
    let out = params.output_shape(input)?;
    Ok((
        Geometry {
            c_in: input.c,
            h: input.h,
            w: input.w,
            k: params.kernel(),
            stride: params.stride,
            pad: params.pad,
            ho: out.h,
            wo: out.w,
        },
        out,
    ))
}

/// Zero-padded cross-correlation plus bias.
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (g, out_shape) = geometry(input.shape(), params)?;
    let mut out = Tensor::zeros(out_shape);
    let c_out = params.c_out();
    let in_len = input.shape().sample();
    let out_len = out_shape.sample();
    if out_len == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(n, dst)| {
            let src = &input.data()[n * in_len..(n + 1) * in_len];
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            im2col(src, &g, &mut cols);
            for (o, plane) in dst.chunks_mut(g.cols()).enumerate() {
                plane.fill(params.bias[o]);
            }
            T::gemm(
                c_out,
                g.rows(),
                g.cols(),
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

/// Gradients of `sum(grad_out * conv2d(input, params))`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (g, out_shape) = geometry(input.shape(), params)?;
    grad_out.expect_shape(out_shape, "conv2d_backward grad_out")?;
    let c_out = params.c_out();
    let in_len = input.shape().sample();
    let out_len = out_shape.sample();
    let w_len = params.weight.shape().len();

    let mut grad_input = Tensor::zeros(input.shape());
    let per_sample: Vec<(Vec<T>, Vec<T>)> = grad_input
        .data_mut()
        .par_chunks_mut(in_len.max(1))
        .enumerate()
        .map(|(n, gin)| {
            let src = &input.data()[n * in_len..(n + 1) * in_len];
            let gout = &grad_out.data()[n * out_len..(n + 1) * out_len];
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            im2col(src, &g, &mut cols);
            let mut gw = vec![T::zero(); w_len];
            // dW = dY * cols^T
            T::gemm(c_out, g.cols(), g.rows(), T::one(), gout, false, &cols, true, T::zero(), &mut gw);
            // dcols = W^T * dY
            T::gemm(
                g.rows(),
                c_out,
                g.cols(),
                T::one(),
                params.weight.data(),
                true,
                gout,
                false,
                T::zero(),
                &mut cols,
            );
            col2im(&cols, &g, gin);
            let gb = gout
                .chunks(g.cols().max(1))
                .map(|plane| plane.iter().copied().sum())
                .collect();
            (gw, gb)
        })
        .collect();

    // Fixed summation order over the batch keeps results bit-identical
    // regardless of thread count.
    let mut weight = Tensor::zeros(params.weight.shape());
    let mut bias = vec![T::zero(); c_out];
    for (gw, gb) in per_sample {
        for (a, b) in weight.data_mut().iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in bias.iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weight,
        bias,
    })
}
