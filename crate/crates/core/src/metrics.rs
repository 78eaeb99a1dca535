//! PSNR, SSIM and the contextual (nearest-neighbour cosine) distance.

use rayon::prelude::*;

use crate::error::{Result, SdanError};
use crate::tensor::{Real, Tensor};

/// Returned by [`psnr`] for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_shape(b.shape(), "mse")?;
    if a.shape().is_empty() {
        return Err(SdanError::Undefined("mse of empty tensors".into()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.shape().len() as f64)
}

pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - mid).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Valid-window separable Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, peak 1) over every
/// valid window position, averaged over batch items and channels.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_shape(b.shape(), "ssim")?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(SdanError::dim(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.h, s.w
        )));
    }
    let k = gaussian_kernel();
    let (c1, c2) = ((K1 * 1.0).powi(2), (K2 * 1.0).powi(2));
    let planes: Vec<(usize, usize)> = (0..s.n).flat_map(|n| (0..s.c).map(move |c| (n, c))).collect();
    let per_plane: Vec<f64> = planes
        .par_iter()
        .map(|&(n, c)| {
            let pa: Vec<f64> = a.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let pb: Vec<f64> = b.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
                pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect()
            };
            let mu_a = filter_valid(&pa, s.h, s.w, &k);
            let mu_b = filter_valid(&pb, s.h, s.w, &k);
            let e_aa = filter_valid(&prod(&|x, _| x * x), s.h, s.w, &k);
            let e_bb = filter_valid(&prod(&|_, y| y * y), s.h, s.w, &k);
            let e_ab = filter_valid(&prod(&|x, y| x * y), s.h, s.w, &k);
            let total: f64 = (0..mu_a.len())
                .map(|i| {
                    let (ma, mb) = (mu_a[i], mu_b[i]);
                    let va = e_aa[i] - ma * ma;
                    let vb = e_bb[i] - mb * mb;
                    let cov = e_ab[i] - ma * mb;
                    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
                })
                .sum();
            total / mu_a.len() as f64
        })
        .collect();
    Ok(per_plane.iter().sum::<f64>() / per_plane.len() as f64)
}

/// A set of equal-length feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(SdanError::dim(format!("{} values do not form {dim}-vectors", data.len())));
        }
        Ok(FeatureSet { dim, data })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(SdanError::dim("feature vectors differ in length"));
        }
        FeatureSet::new(dim.max(1), points.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `p x p` patches of batch item `n` (all channels), taken every
    /// `stride` pixels over valid positions.
    pub fn patches<T: Real>(t: &Tensor<T>, n: usize, p: usize, stride: usize) -> Result<Self> {
        let s = t.shape();
        if p == 0 || stride == 0 || s.h < p || s.w < p {
            return Err(SdanError::dim(format!("cannot cut {p}x{p} patches from {s}")));
        }
        let mut data = Vec::new();
        for y in (0..=s.h - p).step_by(stride) {
            for x in (0..=s.w - p).step_by(stride) {
                for c in 0..s.c {
                    for ky in 0..p {
                        for kx in 0..p {
                            data.push(t.at(n, c, y + ky, x + kx).as_f64());
                        }
                    }
                }
            }
        }
        FeatureSet::new(s.c * p * p, data)
    }
}

/// Cosine distance after both vectors were centred. A zero vector is at
/// distance 0 from another zero vector and 1 from everything else.
fn cosine_distance(x: &[f64], y: &[f64]) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    match (xx == 0.0, yy == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => 1.0 - xy / (xx.sqrt() * yy.sqrt()),
    }
}

/// `(1/N) sum_i min_j d(x_i, y_j)` with `d` the cosine distance of vectors
/// centred on the mean of `y`. Not symmetric.
pub fn contextual_distance(x: &FeatureSet, y: &FeatureSet) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(SdanError::Undefined("contextual distance of an empty set".into()));
    }
    if x.dim != y.dim {
        return Err(SdanError::dim(format!("feature dims {} and {} differ", x.dim, y.dim)));
    }
    let d = x.dim;
    let mut mu = vec![0.0; d];
    for j in 0..y.len() {
        for (m, v) in mu.iter_mut().zip(y.point(j)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= y.len() as f64);
    let center = |p: &[f64]| -> Vec<f64> { p.iter().zip(&mu).map(|(a, m)| a - m).collect() };
    let ys: Vec<Vec<f64>> = (0..y.len()).map(|j| center(y.point(j))).collect();
    let mins: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let xi = center(x.point(i));
            ys.iter()
                .map(|yj| cosine_distance(&xi, yj))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(mins.iter().sum::<f64>() / mins.len() as f64)
}
