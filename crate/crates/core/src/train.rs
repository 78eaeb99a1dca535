//! Epoch loop and held-out evaluation shared by the CLI and the tests.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SdanError};
use crate::metrics::{contextual_distance, psnr, ssim, FeatureSet};
use crate::model::{forward, train_step, AdamConfig, AdamState, SdanModel};
use crate::synth::{stack_pairs, DataMode, MisalignedPair};
use crate::tensor::Tensor;

/// What the model sees as reference during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValMode {
    /// `forward(lr, yref)`, the training-time pairing.
    Reference,
    /// `forward(lr, lr)`, the inference-time pairing.
    SelfRef,
}

impl fmt::Display for ValMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValMode::Reference => "reference",
            ValMode::SelfRef => "self",
        })
    }
}

impl FromStr for ValMode {
    type Err = SdanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(ValMode::Reference),
            "self" => Ok(ValMode::SelfRef),
            other => Err(SdanError::config(format!("unknown validation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many optimiser steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub val_mode: ValMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            max_steps: None,
            val_mode: ValMode::Reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub cx_distance: Option<f64>,
    /// `|mean offset - truth|` in LR pixels, when the pair has truth.
    pub offset_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<PairMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalSummary {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db)).unwrap_or(f64::NAN)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN)
    }

    pub fn mean_cx(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.cx_distance))
    }

    /// Present only when every pair has ground truth.
    pub fn mean_offset_error(&self) -> Option<f64> {
        if self.rows.iter().any(|r| r.offset_error.is_none()) {
            return None;
        }
        mean(self.rows.iter().filter_map(|r| r.offset_error))
    }
}

const EVAL_BATCH: usize = 8;
const CX_PATCH: usize = 3;

/// Contextual distance between 3x3 patches of `a` and `b` (first batch
/// item), sampled every 3 pixels.
pub fn image_cx_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let fa = FeatureSet::patches(a, 0, CX_PATCH, CX_PATCH)?;
    let fb = FeatureSet::patches(b, 0, CX_PATCH, CX_PATCH)?;
    contextual_distance(&fa, &fb)
}

/// Zoomed output (clamped to `[0, 1]`) and mean centre offset for one pair.
pub struct Zoomed {
    pub image: Tensor<f32>,
    pub mean_offset: (f64, f64),
}

/// Run the model over `pairs` in small batches.
pub fn zoom_pairs(model: &SdanModel<f32>, pairs: &[MisalignedPair], mode: ValMode) -> Result<Vec<Zoomed>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let refs: Vec<&MisalignedPair> = chunk.iter().collect();
        let (x, _, yref) = stack_pairs(&refs)?;
        let reference = match mode {
            ValMode::Reference => &yref,
            ValMode::SelfRef => &x,
        };
        let res = forward(model, &x, reference)?;
        for (i, mean_offset) in res.offsets.mean_offset().into_iter().enumerate() {
            out.push(Zoomed {
                image: res.zoomed.narrow_batch(i, 1)?.map(|v| v.clamp(0.0, 1.0)),
                mean_offset,
            });
        }
    }
    Ok(out)
}

/// Score one zoomed image against its pair. Raw-mode offsets live on the
/// packed grid, so they count double in LR pixels.
pub fn score_pair(pair: &MisalignedPair, zoomed: &Tensor<f32>, mean_offset: Option<(f64, f64)>, with_cx: bool) -> Result<PairMetrics> {
    let unit = if pair.mode == DataMode::Raw { 2.0 } else { 1.0 };
    let offset_error = match (pair.truth_shift, mean_offset) {
        (Some((dy, dx)), Some((my, mx))) => Some(((my * unit - dy).powi(2) + (mx * unit - dx).powi(2)).sqrt()),
        _ => None,
    };
    Ok(PairMetrics {
        id: pair.id.clone(),
        psnr_db: psnr(zoomed, &pair.hr, 1.0)?,
        ssim: ssim(zoomed, &pair.hr)?,
        cx_distance: if with_cx {
            Some(image_cx_distance(zoomed, &pair.hr)?)
        } else {
            None
        },
        offset_error,
    })
}

/// Zoom every pair and score it against its HR image.
pub fn evaluate(model: &SdanModel<f32>, pairs: &[MisalignedPair], mode: ValMode, with_cx: bool) -> Result<EvalSummary> {
    let zoomed = zoom_pairs(model, pairs, mode)?;
    let rows = pairs
        .iter()
        .zip(&zoomed)
        .map(|(p, z)| score_pair(p, &z.image, Some(z.mean_offset), with_cx))
        .collect::<Result<_>>()?;
    Ok(EvalSummary { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub val_offset_error: Option<f64>,
}

/// Run `cfg.epochs` epochs of shuffled mini-batches. `on_epoch` sees every
/// record together with the current model.
pub fn train(
    model: &mut SdanModel<f32>,
    train_pairs: &[MisalignedPair],
    val_pairs: &[MisalignedPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &SdanModel<f32>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    if train_pairs.is_empty() {
        return Err(SdanError::config("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(SdanError::config("batch_size must be positive"));
    }
    let mut opt = AdamState::new(&model.params, cfg.adam);
    let mut records = Vec::with_capacity(cfg.epochs);
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut stop = false;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| opt.step >= m) {
                stop = true;
                break;
            }
            let batch: Vec<&MisalignedPair> = idx.iter().map(|&i| &train_pairs[i]).collect();
            let (x, y, yref) = stack_pairs(&batch)?;
            loss_sum += train_step(model, &x, &y, &yref, &mut opt)?;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let val = if val_pairs.is_empty() {
            None
        } else {
            Some(evaluate(model, val_pairs, cfg.val_mode, false)?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: opt.step,
            mean_loss: loss_sum / batches as f64,
            val_psnr: val.as_ref().map(EvalSummary::mean_psnr),
            val_ssim: val.as_ref().map(EvalSummary::mean_ssim),
            val_offset_error: val.as_ref().and_then(EvalSummary::mean_offset_error),
        };
        on_epoch(&record, model)?;
        records.push(record);
        if stop {
            break 'epochs;
        }
    }
    Ok(records)
}
