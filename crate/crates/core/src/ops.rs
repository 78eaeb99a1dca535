//! Elementwise activations and the layout operators: packing, pooling,
//! channel concatenation and flips.

use crate::error::{Result, SdanError};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Backward of [`activation`]. `input` is the forward input; the relu
/// derivative at exactly zero is taken as zero.
pub fn activation_backward<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Result<Tensor<T>> {
    match kind {
        Activation::Relu => input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() }),
        Activation::Sigmoid => input.zip_map(grad_out, |x, g| {
            let s = sigmoid(x);
            g * s * (T::one() - s)
        }),
    }
}

/// relu backward expressed through the forward output (`y > 0` iff `x > 0`).
pub(crate) fn relu_backward_from_output<T: Real>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    output.zip_map(grad_out, |y, g| if y > T::zero() { g } else { T::zero() })
}

/// Fold `k x k` spatial blocks into channels:
/// `out[n][c*k*k + ky*k + kx][y][x] = in[n][c][y*k + ky][x*k + kx]`.
pub fn space_to_depth<T: Real>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if k == 0 || !s.h.is_multiple_of(k) || !s.w.is_multiple_of(k) {
        return Err(SdanError::dim(format!(
            "space_to_depth: {}x{} not divisible by {k}",
            s.h, s.w
        )));
    }
    let out_shape = Shape::new(s.n, s.c * k * k, s.h / k, s.w / k);
    let mut out = Tensor::zeros(out_shape);
    let (ho, wo) = (out_shape.h, out_shape.w);
    let src = input.data();
    let dst = out.data_mut();
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for ky in 0..k {
                for kx in 0..k {
                    for y in 0..ho {
                        let row = ((n * s.c + c) * s.h + y * k + ky) * s.w;
                        for x in 0..wo {
                            dst[i] = src[row + x * k + kx];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_depth`]; doubles as the pixel-shuffle upsampler.
pub fn depth_to_space<T: Real>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if k == 0 || !s.c.is_multiple_of(k * k) {
        return Err(SdanError::dim(format!(
            "depth_to_space: {} channels not divisible by {}",
            s.c,
            k * k
        )));
    }
    let c_out = s.c / (k * k);
    let out_shape = Shape::new(s.n, c_out, s.h * k, s.w * k);
    let mut out = Tensor::zeros(out_shape);
    let src = input.data();
    let dst = out.data_mut();
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..c_out {
            for ky in 0..k {
                for kx in 0..k {
                    for y in 0..s.h {
                        let row = ((n * c_out + c) * out_shape.h + y * k + ky) * out_shape.w;
                        for x in 0..s.w {
                            dst[row + x * k + kx] = src[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Spatial mean per channel, shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(SdanError::dim("global_avg_pool on empty spatial extent"));
    }
    let inv = T::one() / T::lit(s.plane() as f64);
    let data = input
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(Shape::new(input_shape.n, input_shape.c, 1, 1), "global_avg_pool_backward")?;
    let inv = T::one() / T::lit(input_shape.plane() as f64);
    let mut out = Tensor::zeros(input_shape);
    for (plane, &g) in out.data_mut().chunks_mut(input_shape.plane()).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    Ok(out)
}

/// Channel concatenation, `a` first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(SdanError::dim(format!("concat_channels: {sa} vs {sb}")));
    }
    let mut data = Vec::with_capacity(sa.len() + sb.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec(sa.with_c(sa.c + sb.c), data)
}

/// Backward of [`concat_channels`]: split `grad` after `c_a` channels.
pub fn split_channels<T: Real>(grad: &Tensor<T>, c_a: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = grad.shape();
    if c_a > s.c {
        return Err(SdanError::dim(format!("split at {c_a} of {} channels", s.c)));
    }
    let (la, lb) = (c_a * s.plane(), (s.c - c_a) * s.plane());
    let mut da = Vec::with_capacity(la * s.n);
    let mut db = Vec::with_capacity(lb * s.n);
    for n in 0..s.n {
        let item = grad.sample(n);
        da.extend_from_slice(&item[..la]);
        db.extend_from_slice(&item[la..]);
    }
    Ok((
        Tensor::from_vec(s.with_c(c_a), da)?,
        Tensor::from_vec(s.with_c(s.c - c_a), db)?,
    ))
}

/// Which spatial axes to mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlipAxes {
    /// Mirror left/right (reverse the width axis).
    pub horizontal: bool,
    /// Mirror top/bottom (reverse the height axis).
    pub vertical: bool,
}

impl FlipAxes {
    pub const NONE: FlipAxes = FlipAxes {
        horizontal: false,
        vertical: false,
    };
    pub const H: FlipAxes = FlipAxes {
        horizontal: true,
        vertical: false,
    };
    pub const V: FlipAxes = FlipAxes {
        horizontal: false,
        vertical: true,
    };
    pub const HV: FlipAxes = FlipAxes {
        horizontal: true,
        vertical: true,
    };

    /// The four elements of the flip group.
    pub const ALL: [FlipAxes; 4] = [Self::NONE, Self::H, Self::V, Self::HV];
}

/// Spatial mirror. Self-adjoint and an involution.
pub fn flip<T: Real>(input: &Tensor<T>, axes: FlipAxes) -> Tensor<T> {
    if axes == FlipAxes::NONE {
        return input.clone();
    }
    let s = input.shape();
    let mut out = Tensor::zeros(s);
    let src = input.data();
    let dst = out.data_mut();
    for (p, plane) in dst.chunks_mut(s.plane().max(1)).enumerate() {
        let base = p * s.plane();
        for y in 0..s.h {
            let sy = if axes.vertical { s.h - 1 - y } else { y };
            for x in 0..s.w {
                let sx = if axes.horizontal { s.w - 1 - x } else { x };
                plane[y * s.w + x] = src[base + sy * s.w + sx];
            }
        }
    }
    out
}

/// Multiply every `(n, c)` plane of `input` by `gates[n][c]`.
pub(crate) fn scale_channels<T: Real>(input: &Tensor<T>, gates: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    gates.expect_shape(Shape::new(s.n, s.c, 1, 1), "scale_channels gates")?;
    let mut out = input.clone();
    for (plane, &g) in out.data_mut().chunks_mut(s.plane().max(1)).zip(gates.data()) {
        for v in plane {
            *v *= g;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(shape: Shape) -> Tensor<f32> {
        Tensor::from_vec(shape, (0..shape.len()).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&t, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        let zero = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        assert_eq!(activation(&zero, Activation::Sigmoid).data(), &[0.5]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Tensor::full(x.shape(), 1.0);
        let d = activation_backward(&x, &g, Activation::Relu).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn space_to_depth_layout() {
        let t = seq(Shape::new(1, 1, 4, 4));
        let p = space_to_depth(&t, 2).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 4, 2, 2));
        assert_eq!(p.plane(0, 0), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(p.plane(0, 1), &[1.0, 3.0, 9.0, 11.0]);
        assert_eq!(p.plane(0, 2), &[4.0, 6.0, 12.0, 14.0]);
        assert_eq!(space_to_depth(&t, 1).unwrap(), t);
    }

    #[test]
    fn packed_dimension_formula() {
        let c = 8;
        let feat = Tensor::<f32>::zeros(Shape::new(1, c, 8, 8));
        let both = concat_channels(&feat, &feat).unwrap();
        let packed = space_to_depth(&both, 4).unwrap();
        assert_eq!(packed.shape(), Shape::new(1, 2 * c * 16, 2, 2));
        assert_eq!(packed.shape().c, 256);
    }

    #[test]
    fn depth_to_space_layout() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = depth_to_space(&t, 2).unwrap();
        assert_eq!(u.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = seq(Shape::new(2, 3, 2, 2));
        assert_eq!(depth_to_space(&r, 1).unwrap(), r);
    }

    #[test]
    fn pack_errors() {
        let t = seq(Shape::new(1, 1, 4, 6));
        assert!(matches!(space_to_depth(&t, 4), Err(SdanError::Dimension(_))));
        let u = seq(Shape::new(1, 3, 2, 2));
        assert!(matches!(depth_to_space(&u, 2), Err(SdanError::Dimension(_))));
    }

    #[test]
    fn pool_values() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&t).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full(Shape::new(2, 3, 5, 4), 0.25);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn pool_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::<f32>::random_uniform(Shape::new(2, 3, 7, 5), -1.0, 1.0, &mut rng);
        let p = global_avg_pool(&t).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for y in 0..7 {
                    for x in 0..5 {
                        acc += t.at(n, c, y, x) as f64;
                    }
                }
                assert!((p.at(n, c, 0, 0) as f64 - acc / 35.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn concat_and_split() {
        let a = seq(Shape::new(2, 2, 3, 3));
        let b = seq(Shape::new(2, 1, 3, 3)).scale(-1.0);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), Shape::new(2, 3, 3, 3));
        assert_eq!(ab.plane(1, 0), a.plane(1, 0));
        assert_eq!(ab.plane(1, 2), b.plane(1, 0));
        let (ga, gb) = split_channels(&ab, 2).unwrap();
        assert_eq!((ga, gb), (a.clone(), b));

        let empty = Tensor::<f32>::zeros(Shape::new(2, 0, 3, 3));
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        let wrong = Tensor::<f32>::zeros(Shape::new(2, 1, 3, 4));
        assert!(concat_channels(&a, &wrong).is_err());
    }

    #[test]
    fn flip_values_and_group_laws() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flip(&t, FlipAxes::H).data(), &[3.0, 2.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = Tensor::<f32>::random_uniform(Shape::new(2, 2, 5, 6), -1.0, 1.0, &mut rng);
        for axes in FlipAxes::ALL {
            assert_eq!(flip(&flip(&r, axes), axes), r);
        }
        let hv = flip(&r, FlipAxes::HV);
        assert_eq!(flip(&flip(&r, FlipAxes::H), FlipAxes::V), hv);
        assert_eq!(flip(&flip(&r, FlipAxes::V), FlipAxes::H), hv);
    }
}
