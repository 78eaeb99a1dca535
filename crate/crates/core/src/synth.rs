//! Synthetic misaligned zoom pairs with a known global translation.
//!
//! For a shift `(dy, dx)` in LR pixels the HR crop sits at `origin` and the
//! LR view is cut at `origin - s * shift`, so `lr(p) == yref(p - shift)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SdanError};
use crate::io::{read_image, read_sdtn, write_sdtn};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    Rgb,
    Raw,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::Rgb => "rgb",
            DataMode::Raw => "raw",
        })
    }
}

impl FromStr for DataMode {
    type Err = SdanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(DataMode::Rgb),
            "raw" => Ok(DataMode::Raw),
            other => Err(SdanError::config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub source_dir: Option<PathBuf>,
    /// Procedural sources appended after any decoded ones.
    pub synthetic_sources: usize,
    pub scale: usize,
    pub crop_lr: usize,
    pub shift_max: usize,
    pub fractional: bool,
    pub count: usize,
    pub seed: u64,
    pub mode: DataMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            source_dir: None,
            synthetic_sources: 0,
            scale: 4,
            crop_lr: 64,
            shift_max: 8,
            fractional: false,
            count: 256,
            seed: 0,
            mode: DataMode::Rgb,
        }
    }
}

impl GenConfig {
    /// Side length a source needs so both views fit for every shift.
    pub fn min_source_size(&self) -> usize {
        (self.crop_lr + 2 * self.shift_max) * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.crop_lr == 0 {
            return Err(SdanError::config("scale and crop_lr must be positive"));
        }
        if self.mode == DataMode::Raw && !self.crop_lr.is_multiple_of(2) {
            return Err(SdanError::config("raw mode needs an even crop_lr"));
        }
        if self.source_dir.is_none() && self.synthetic_sources == 0 {
            return Err(SdanError::config("no source directory and no synthetic sources"));
        }
        Ok(())
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct MisalignedPair {
    pub id: String,
    /// `(1, 3, h, w)`, or `(1, 4, h/2, w/2)` in raw mode.
    pub lr: Tensor<f32>,
    /// `(1, 3, s*h, s*w)`.
    pub hr: Tensor<f32>,
    /// Same shape as `lr`.
    pub yref: Tensor<f32>,
    /// LR-pixel displacement, absent for datasets without ground truth.
    pub truth_shift: Option<(f64, f64)>,
    pub scale: usize,
    pub mode: DataMode,
}

/// Average over non-overlapping `s x s` blocks.
pub fn box_downsample(t: &Tensor<f32>, s: usize) -> Result<Tensor<f32>> {
    let sh = t.shape();
    if s == 0 || !sh.h.is_multiple_of(s) || !sh.w.is_multiple_of(s) {
        return Err(SdanError::dim(format!("{sh} is not divisible into {s}x{s} blocks")));
    }
    let (h, w) = (sh.h / s, sh.w / s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c, h, w));
    for n in 0..sh.n {
        for c in 0..sh.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for ky in 0..s {
                        let row = &src[(y * s + ky) * sh.w + x * s..][..s];
                        acc += row.iter().map(|&v| v as f64).sum::<f64>();
                    }
                    dst[y * w + x] = (acc * inv) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Row/column phase of each packed channel, `[R, G1, G2, B]`.
const BAYER_PHASES: [(usize, usize, usize); 4] = [(0, 0, 0), (0, 1, 1), (1, 0, 1), (1, 1, 2)];

/// Sample an RGGB mosaic from RGB and pack its four phases as channels.
pub fn bayer_pack(rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = rgb.shape();
    if s.c != 3 || !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(SdanError::dim(format!("bayer_pack needs 3 channels and even dims, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, 4, s.h / 2, s.w / 2), |n, c, y, x| {
        let (py, px, src) = BAYER_PHASES[c];
        rgb.at(n, src, 2 * y + py, 2 * x + px)
    }))
}

/// Single-channel RGGB mosaic at full resolution.
pub fn bayer_mosaic(rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = rgb.shape();
    if s.c != 3 || !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(SdanError::dim(format!("bayer_mosaic needs 3 channels and even dims, got {s}")));
    }
    Ok(Tensor::from_fn(s.with_c(1), |n, _, y, x| {
        let phase = BAYER_PHASES.iter().find(|p| p.0 == y % 2 && p.1 == x % 2).unwrap();
        rgb.at(n, phase.2, y, x)
    }))
}

/// Inverse of the packing step: scatter the four phases back into a mosaic.
pub fn bayer_unpack(packed: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = packed.shape();
    if s.c != 4 {
        return Err(SdanError::dim(format!("bayer_unpack needs 4 channels, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, 1, 2 * s.h, 2 * s.w), |n, _, y, x| {
        let c = (y % 2) * 2 + x % 2;
        packed.at(n, c, y / 2, x / 2)
    }))
}

fn crop(src: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let s = src.shape();
    Tensor::from_fn(Shape::new(1, s.c, h, w), |_, c, y, x| src.at(0, c, y0 + y, x0 + x))
}

fn crop_bilinear(src: &Tensor<f32>, y0: f64, x0: f64, h: usize, w: usize) -> Tensor<f32> {
    let s = src.shape();
    let (fy, fx) = (y0.floor(), x0.floor());
    let (ly, lx) = (y0 - fy, x0 - fx);
    let (by, bx) = (fy as usize, fx as usize);
    Tensor::from_fn(Shape::new(1, s.c, h, w), |_, c, y, x| {
        let at = |dy: usize, dx: usize| {
            let (yy, xx) = (by + y + dy, bx + x + dx);
            if yy < s.h && xx < s.w {
                src.at(0, c, yy, xx) as f64
            } else {
                0.0
            }
        };
        let top = at(0, 0) * (1.0 - lx) + at(0, 1) * lx;
        let bottom = at(1, 0) * (1.0 - lx) + at(1, 1) * lx;
        (top * (1.0 - ly) + bottom * ly) as f32
    })
}

/// Build one pair from an HR source `(1, 3, H, W)` with the HR crop at
/// `origin` (row, column).
pub fn synth_pair(
    source: &Tensor<f32>,
    shift: (f64, f64),
    cfg: &GenConfig,
    origin: (usize, usize),
    id: impl Into<String>,
) -> Result<MisalignedPair> {
    let s = source.shape();
    if s.n != 1 || s.c != 3 {
        return Err(SdanError::Generation(format!("source must be 1x3xHxW, got {s}")));
    }
    let hr_size = cfg.crop_lr * cfg.scale;
    let scale = cfg.scale as f64;
    let (ly, lx) = (origin.0 as f64 - scale * shift.0, origin.1 as f64 - scale * shift.1);
    let fits = |start: f64, limit: usize| {
        start >= 0.0 && start.ceil() + hr_size as f64 <= limit as f64
    };
    if origin.0 + hr_size > s.h || origin.1 + hr_size > s.w || !fits(ly, s.h) || !fits(lx, s.w) {
        return Err(SdanError::Generation(format!(
            "crop windows for origin {origin:?} and shift {shift:?} leave the {}x{} source",
            s.h, s.w
        )));
    }
    let hr = crop(source, origin.0, origin.1, hr_size, hr_size);
    let lr_view = if ly.fract() == 0.0 && lx.fract() == 0.0 {
        crop(source, ly as usize, lx as usize, hr_size, hr_size)
    } else {
        crop_bilinear(source, ly, lx, hr_size, hr_size)
    };
    let mut lr = box_downsample(&lr_view, cfg.scale)?;
    let mut yref = box_downsample(&hr, cfg.scale)?;
    if cfg.mode == DataMode::Raw {
        lr = bayer_pack(&lr)?;
        yref = bayer_pack(&yref)?;
    }
    Ok(MisalignedPair {
        id: id.into(),
        lr,
        hr,
        yref,
        truth_shift: Some(shift),
        scale: cfg.scale,
        mode: cfg.mode,
    })
}

/// A smooth random RGB image: per-channel sums of Gaussian blobs of mixed
/// sign, normalised to `[0, 1]`.
pub fn procedural_source(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size_f = size as f64;
    let mut img = Tensor::<f32>::zeros(Shape::new(1, 3, size, size));
    for c in 0..3 {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..BLOBS_PER_CHANNEL)
            .map(|_| {
                let cy = rng.gen_range(0.0..size_f);
                let cx = rng.gen_range(0.0..size_f);
                let r = rng.gen_range(BLOB_RADIUS.0..BLOB_RADIUS.1) * size_f / 256.0;
                let a = rng.gen_range(-1.0..1.0);
                (cy, cx, 1.0 / (2.0 * r * r), a)
            })
            .collect();
        let plane = img.plane_mut(0, c);
        for y in 0..size {
            for x in 0..size {
                plane[y * size + x] = blobs
                    .iter()
                    .map(|&(cy, cx, k, a)| {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        a * (-d2 * k).exp()
                    })
                    .sum::<f64>() as f32;
            }
        }
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        plane.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
    img
}

const BLOBS_PER_CHANNEL: usize = 12;
/// Radius range for a 256-pixel source; scaled with the size.
const BLOB_RADIUS: (f64, f64) = (16.0, 48.0);

/// Decodable, large-enough sources plus any procedural ones, and a warning
/// per skipped file.
pub fn load_sources(cfg: &GenConfig) -> Result<(Vec<Tensor<f32>>, Vec<String>)> {
    let need = cfg.min_source_size();
    let mut sources = Vec::new();
    let mut warnings = Vec::new();
    if let Some(dir) = &cfg.source_dir {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| SdanError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        for path in paths {
            match read_image(&path) {
                Ok(img) if img.shape().h >= need && img.shape().w >= need => sources.push(img),
                Ok(img) => warnings.push(format!(
                    "skipping {}: {}x{} is smaller than the required {need}x{need}",
                    path.display(),
                    img.shape().h,
                    img.shape().w
                )),
                Err(e) => warnings.push(format!("skipping {}: {e}", path.display())),
            }
        }
    }
    let side = need.max(256);
    for i in 0..cfg.synthetic_sources {
        sources.push(procedural_source(side, cfg.seed ^ (0x5eed_0000 + i as u64)));
    }
    if sources.is_empty() {
        return Err(SdanError::Generation(format!(
            "no usable source images (need at least {need}x{need})"
        )));
    }
    Ok((sources, warnings))
}

fn sample_shift(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> (f64, f64) {
    let m = cfg.shift_max as i64;
    if cfg.fractional {
        let mf = m as f64;
        (rng.gen_range(-mf..=mf), rng.gen_range(-mf..=mf))
    } else {
        (rng.gen_range(-m..=m) as f64, rng.gen_range(-m..=m) as f64)
    }
}

/// Exactly `cfg.count` pairs. Pair `i` draws from its own ChaCha stream
/// `(seed, i)`, so the result does not depend on thread count.
pub fn generate_pairs(cfg: &GenConfig, sources: &[Tensor<f32>]) -> Result<Vec<MisalignedPair>> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(SdanError::Generation("no sources".into()));
    }
    let hr_size = cfg.crop_lr * cfg.scale;
    let margin = cfg.shift_max * cfg.scale;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let src = &sources[rng.gen_range(0..sources.len())];
            let shift = sample_shift(&mut rng, cfg);
            let s = src.shape();
            let oy = rng.gen_range(margin..=s.h - hr_size - margin);
            let ox = rng.gen_range(margin..=s.w - hr_size - margin);
            synth_pair(src, shift, cfg, (oy, ox), format!("{i:06}"))
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "id\tdy\tdx\tscale\tmode";

/// Lay pairs out as `pairs/ID.{lr,hr,yref}.sdtn` plus `manifest.tsv`.
pub fn write_dataset(dir: &Path, pairs: &[MisalignedPair]) -> Result<()> {
    let pairs_dir = dir.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|e| SdanError::io(&pairs_dir, e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for p in pairs {
        write_sdtn(&pairs_dir.join(format!("{}.lr.sdtn", p.id)), &p.lr)?;
        write_sdtn(&pairs_dir.join(format!("{}.hr.sdtn", p.id)), &p.hr)?;
        write_sdtn(&pairs_dir.join(format!("{}.yref.sdtn", p.id)), &p.yref)?;
        let (dy, dx) = match p.truth_shift {
            Some((dy, dx)) => (dy.to_string(), dx.to_string()),
            None => (String::new(), String::new()),
        };
        manifest.push_str(&format!("{}\t{dy}\t{dx}\t{}\t{}\n", p.id, p.scale, p.mode));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| SdanError::io(&path, e))
}

/// Read a dataset directory written by [`write_dataset`]. Empty `dy`/`dx`
/// cells mean no ground truth.
pub fn load_dataset(dir: &Path) -> Result<Vec<MisalignedPair>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| SdanError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(SdanError::decode(&path, "missing manifest header"));
    }
    let mut pairs = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| SdanError::decode(&path, format!("line {}: {what}", ln + 2));
        if cols.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let truth_shift = match (cols[1].trim(), cols[2].trim()) {
            ("", "") => None,
            (dy, dx) => Some((
                dy.parse().map_err(|_| bad("bad dy"))?,
                dx.parse().map_err(|_| bad("bad dx"))?,
            )),
        };
        let id = cols[0].to_string();
        let load = |kind: &str| read_sdtn(&dir.join("pairs").join(format!("{id}.{kind}.sdtn")));
        pairs.push(MisalignedPair {
            lr: load("lr")?,
            hr: load("hr")?,
            yref: load("yref")?,
            truth_shift,
            scale: cols[3].parse().map_err(|_| bad("bad scale"))?,
            mode: cols[4].parse().map_err(|_| bad("bad mode"))?,
            id,
        });
    }
    Ok(pairs)
}

/// Stack pairs into `(lr, hr, yref)` batches.
pub fn stack_pairs(pairs: &[&MisalignedPair]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let lr: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.lr).collect();
    let hr: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.hr).collect();
    let yref: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.yref).collect();
    Ok((
        Tensor::stack_batch(&lr)?,
        Tensor::stack_batch(&hr)?,
        Tensor::stack_batch(&yref)?,
    ))
}
