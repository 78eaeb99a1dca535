//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 5 and 6 train three small networks and take about an hour on one
//! core; they run only with `--full` (or `SDAN_ACCEPTANCE_FULL=1`):
//!
//!     cargo test --release -p sdan-cli --test acceptance -- --full

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdan_core::attention::{cross_packing_attention, effective_reduction, AttentionParams, CpaParams};
use sdan_core::metrics::{contextual_distance, psnr, ssim, FeatureSet, SSIM_SIGMA, SSIM_WINDOW};
use sdan_core::model::{
    forward, l1_loss, masked_zoom_loss, misaligned_l1, AdamConfig, AttentionKind, ForwardOutput, ModelConfig,
    SdanModel,
};
use sdan_core::ops::{depth_to_space, space_to_depth};
use sdan_core::synth::{generate_pairs, load_sources, GenConfig, MisalignedPair};
use sdan_core::train::{evaluate, train, TrainConfig, ValMode};
use sdan_core::{
    conv2d, deform_conv_backward, deform_conv_forward, ConvParams, OffsetField, OffsetMode, Shape, Tensor,
    ValidityMask,
};

const GRADCHECK_RUNTIME: Duration = Duration::from_secs(120);
const EQUIV_TOL: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-9;
const CLOSURE_TOL_INTEGER: f64 = 1e-6;
const CLOSURE_TOL_FRACTIONAL: f64 = 1e-3;

const OFFSET_TOL_PX: f64 = 1.0;
const BAND_TOL_PX: f64 = 1.0;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const MIN_ALIGN_GAIN_DB: f64 = 2.0;

const TRAIN_PAIRS: usize = 256;
const HELD_OUT_PAIRS: usize = 32;
const SHIFT_MAX: usize = 8;
const CROP_LR: usize = 32;
const SCALE: usize = 4;
const STEPS: usize = 4000;
const LEARNING_RATE: f64 = 1e-3;
const SEED: u64 = 7;

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sdan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdan"))
        .args(args)
        .env("SDAN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// 1

fn gradient_completeness() -> Check {
    let mut detail = Vec::new();
    for (label, args) in [("f64", &["gradcheck", "--f64"][..]), ("f32", &["gradcheck"][..])] {
        let t = Instant::now();
        let o = sdan(args);
        let elapsed = t.elapsed();
        let out = String::from_utf8_lossy(&o.stdout);
        ensure(o.status.code() == Some(0), || format!("{label} gradcheck exited {:?}:\n{out}", o.status.code()))?;
        let rows: Vec<&str> = out.lines().skip(1).filter(|l| !l.trim().is_empty()).collect();
        ensure(!rows.is_empty() && rows.iter().all(|l| l.ends_with("ok")), || format!("{label}:\n{out}"))?;
        for row in &rows {
            let trials: usize = row.split_whitespace().nth(1).and_then(|v| v.parse().ok()).unwrap_or(0);
            ensure(trials >= 100, || format!("{label}: {row}"))?;
        }
        ensure(elapsed < GRADCHECK_RUNTIME, || format!("{label} took {elapsed:?}"))?;
        detail.push(format!("{label} {} ops in {:.1}s", rows.len(), elapsed.as_secs_f64()));
    }
    Ok(detail.join(", "))
}

// 2

fn zero_offset_equivalence() -> Check {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5));
        let (h, w) = (r.gen_range(2..10), r.gen_range(2..10));
        let f = Tensor::<f64>::random_uniform(Shape::new(n, cin, h, w), -1.0, 1.0, &mut r);
        let params = ConvParams::fan_in_uniform(cin, cout, 3, &mut r);
        let plain = conv2d(&f, &params).map_err(|e| e.to_string())?;
        for mode in [OffsetMode::Squared, OffsetMode::PerPoint] {
            let out = deform_conv_forward(&f, &OffsetField::zeros(mode, n, h, w, 3), &params).map_err(|e| e.to_string())?;
            worst = worst.max(out.max_abs_diff(&plain).unwrap());
        }
    }
    ensure(worst <= EQUIV_TOL, || format!("max diff {worst:e}"))?;
    Ok(format!("50 cases, max diff {worst:.1e}"))
}

// 3

fn mode_collapse_equivalence() -> Check {
    let mut r = rng(3);
    let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(2..8), r.gen_range(2..8));
        let f = Tensor::<f64>::random_uniform(Shape::new(n, cin, h, w), -1.0, 1.0, &mut r);
        let params = ConvParams::fan_in_uniform(cin, cout, 3, &mut r);
        let sq = OffsetField::new(
            OffsetMode::Squared,
            Tensor::random_uniform(Shape::new(n, 2, h, w), -3.0, 3.0, &mut r),
        )
        .unwrap();
        let pp = sq.broadcast_to_taps(3).unwrap();
        let a = deform_conv_forward(&f, &sq, &params).unwrap();
        let b = deform_conv_forward(&f, &pp, &params).unwrap();
        fwd = fwd.max(a.max_abs_diff(&b).unwrap());

        let g = Tensor::random_uniform(a.shape(), -1.0, 1.0, &mut r);
        let ga = deform_conv_backward(&f, &sq, &params, &g).unwrap();
        let gb = deform_conv_backward(&f, &pp, &params, &g).unwrap();
        let summed = OffsetField::new(OffsetMode::PerPoint, gb.offsets).unwrap().sum_over_taps();
        bwd = bwd
            .max(summed.max_abs_diff(&ga.offsets).unwrap())
            .max(ga.feature.max_abs_diff(&gb.feature).unwrap())
            .max(ga.weight.max_abs_diff(&gb.weight).unwrap());
    }
    ensure(fwd <= EQUIV_TOL && bwd <= EQUIV_TOL, || format!("forward {fwd:e}, backward {bwd:e}"))?;
    Ok(format!("forward {fwd:.1e}, summed gradients {bwd:.1e}"))
}

// 4

fn packing_and_cpa_identity() -> Check {
    let mut r = rng(4);
    for k in [2usize, 4] {
        for _ in 0..25 {
            let shape = Shape::new(r.gen_range(1..3), r.gen_range(1..5), k * r.gen_range(1..4), k * r.gen_range(1..4));
            let x = Tensor::<f32>::random_uniform(shape, -1.0, 1.0, &mut r);
            let back = depth_to_space(&space_to_depth(&x, k).unwrap(), k).unwrap();
            ensure(back == x, || format!("round trip not bit-exact for K={k}, {shape:?}"))?;
        }
    }
    let mut worst = 0.0f64;
    for k in [2usize, 4] {
        for _ in 0..25 {
            let c = r.gen_range(1..4);
            let shape = Shape::new(r.gen_range(1..3), c, k * r.gen_range(1..4), k * r.gen_range(1..4));
            let f = Tensor::<f64>::random_uniform(shape, 0.1, 1.0, &mut r);
            let packed = c * k * k;
            let hid = packed / effective_reduction(packed, 4);
            // saturated sigmoid: every gate is exactly one
            let gates = AttentionParams::new(
                Tensor::full(Shape::new(hid, packed, 1, 1), 1.0),
                Tensor::full(Shape::new(packed, hid, 1, 1), 100.0),
            )
            .unwrap();
            let out = cross_packing_attention(&f, &CpaParams { k, inner: gates }).unwrap();
            worst = worst.max(out.max_abs_diff(&f).unwrap());
        }
    }
    ensure(worst <= EQUIV_TOL, || format!("CPA identity max diff {worst:e}"))?;
    Ok(format!("K in {{2,4}} bit-exact, CPA identity max diff {worst:.1e}"))
}

// 7

fn bilinear_zero_padded(t: &Tensor<f64>, n: usize, c: usize, y: f64, x: f64) -> f64 {
    let s = t.shape();
    let get = |yy: i64, xx: i64| {
        if yy < 0 || xx < 0 || yy >= s.h as i64 || xx >= s.w as i64 {
            0.0
        } else {
            t.at(n, c, yy as usize, xx as usize)
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    (1.0 - fy) * (1.0 - fx) * get(y0, x0)
        + (1.0 - fy) * fx * get(y0, x0 + 1)
        + fy * (1.0 - fx) * get(y0 + 1, x0)
        + fy * fx * get(y0 + 1, x0 + 1)
}

fn oracle_misaligned_l1(a: &Tensor<f64>, b: &Tensor<f64>, dy: f64, dx: f64) -> f64 {
    let s = a.shape();
    let (mut sum, mut count) = (0.0, 0usize);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let (sy, sx) = (y as f64 + dy, x as f64 + dx);
                    if sy < 0.0 || sx < 0.0 || sy > (s.h - 1) as f64 || sx > (s.w - 1) as f64 {
                        continue;
                    }
                    sum += (bilinear_zero_padded(a, n, c, sy, sx) - b.at(n, c, y, x)).abs();
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

fn oracle_masked_term(pred: &Tensor<f64>, target: &Tensor<f64>, mask: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let s = pred.shape();
    let mut valid = 0.0;
    let mut sum = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let m = mask.at(n, 0, y, x);
                    valid += m;
                    sum += m * (pred.at(n, c, y, x) - target.at(n, c, y, x)).abs();
                }
            }
        }
    }
    let grad = Tensor::from_fn(s, |n, c, y, x| {
        mask.at(n, 0, y, x) * (pred.at(n, c, y, x) - target.at(n, c, y, x)).signum() / valid
    });
    (sum / valid, grad)
}

fn oracle_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let half = (SSIM_WINDOW / 2) as f64;
    let mut wts = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
            wts[i * SSIM_WINDOW + j] = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut windows = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y0 in 0..=s.h - SSIM_WINDOW {
                for x0 in 0..=s.w - SSIM_WINDOW {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = wts[i * SSIM_WINDOW + j];
                            ma += wt * a.at(n, c, y0 + i, x0 + j);
                            mb += wt * b.at(n, c, y0 + i, x0 + j);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = wts[i * SSIM_WINDOW + j];
                            let (da, db) = (a.at(n, c, y0 + i, x0 + j) - ma, b.at(n, c, y0 + i, x0 + j) - mb);
                            va += wt * da * da;
                            vb += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    windows += 1;
                }
            }
        }
    }
    acc / windows as f64
}

fn oracle_contextual(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let d = ys[0].len();
    let mu: Vec<f64> = (0..d).map(|k| ys.iter().map(|y| y[k]).sum::<f64>() / ys.len() as f64).collect();
    let cos = |u: &[f64], v: &[f64]| {
        let u: Vec<f64> = u.iter().zip(&mu).map(|(a, m)| a - m).collect();
        let v: Vec<f64> = v.iter().zip(&mu).map(|(a, m)| a - m).collect();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        1.0 - dot / (nu * nv)
    };
    xs.iter()
        .map(|x| ys.iter().map(|y| cos(x, y)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / xs.len() as f64
}

fn loss_and_metric_oracles() -> Check {
    let mut r = rng(7);
    let mut worst = [0.0f64; 6];
    let img = |r: &mut ChaCha8Rng, s: Shape| Tensor::<f64>::random_uniform(s, 0.0, 1.0, r);
    for _ in 0..20 {
        let s = Shape::new(r.gen_range(1..3), 3, r.gen_range(11..16), r.gen_range(11..16));
        let (a, b) = (img(&mut r, s), img(&mut r, s));

        let brute_l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / s.len() as f64;
        worst[0] = worst[0].max((l1_loss(&a, &b).unwrap() - brute_l1).abs());

        let integer = r.gen_bool(0.5);
        let mut shift = || {
            let v = r.gen_range(-4.0..4.0f64);
            if integer {
                v.round()
            } else {
                v
            }
        };
        let (dy, dx) = (shift(), shift());
        let got = misaligned_l1(&a, &b, (dy, dx)).unwrap();
        worst[1] = worst[1].max((got - oracle_misaligned_l1(&a, &b, dy, dx)).abs());

        let (ho, wo) = (2 * s.h, 2 * s.w);
        let mask_lr = Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |_, _, _, _| if r.gen_bool(0.7) { 1.0 } else { 0.0 });
        let mut mask_lr = mask_lr;
        mask_lr.data_mut()[0] = 1.0;
        let mask_hr = Tensor::from_fn(Shape::new(s.n, 1, ho, wo), |n, _, y, x| mask_lr.at(n, 0, y / 2, x / 2));
        let hr_shape = Shape::new(s.n, 3, ho, wo);
        let out = ForwardOutput {
            zoomed: img(&mut r, hr_shape),
            aligned: a.clone(),
            mask_hr: ValidityMask { data: mask_hr.clone() },
            mask_lr: ValidityMask { data: mask_lr.clone() },
            offsets: OffsetField::zeros(OffsetMode::Squared, s.n, s.h, s.w, 3),
        };
        let y = img(&mut r, hr_shape);
        let terms = masked_zoom_loss(&out, &y, &b).unwrap();
        let (at, ag) = oracle_masked_term(&out.aligned, &b, &mask_lr);
        let (zt, zg) = oracle_masked_term(&out.zoomed, &y, &mask_hr);
        worst[2] = worst[2]
            .max((terms.aligned_term - at).abs())
            .max((terms.zoom_term - zt).abs())
            .max(terms.grad_aligned.max_abs_diff(&ag).unwrap())
            .max(terms.grad_zoomed.max_abs_diff(&zg).unwrap());

        let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / s.len() as f64;
        worst[3] = worst[3].max((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs());

        let near = a.zip_map(&b, |x, y| 0.8 * x + 0.2 * y).unwrap();
        worst[4] = worst[4].max((ssim(&a, &near).unwrap() - oracle_ssim(&a, &near)).abs());

        let dim = r.gen_range(1..6);
        let pts = |r: &mut ChaCha8Rng, k: usize| -> Vec<Vec<f64>> {
            (0..k).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
        };
        let (nx, ny) = (r.gen_range(1..8), r.gen_range(2..10));
        let (xs, ys) = (pts(&mut r, nx), pts(&mut r, ny));
        let got = contextual_distance(&FeatureSet::from_points(&xs).unwrap(), &FeatureSet::from_points(&ys).unwrap()).unwrap();
        worst[5] = worst[5].max((got - oracle_contextual(&xs, &ys)).abs());
    }
    let names = ["l1", "misaligned_l1", "masked loss", "psnr", "ssim", "contextual"];
    for (name, w) in names.iter().zip(worst) {
        ensure(w <= ORACLE_TOL, || format!("{name} differs from its oracle by {w:e}"))?;
    }

    let mut pairs = 0;
    let mut closure = [0.0f64; 2];
    for (i, fractional) in [false, true].into_iter().enumerate() {
        for scale in [2usize, 4] {
            let cfg = GenConfig {
                synthetic_sources: 3,
                scale,
                crop_lr: 16,
                shift_max: SHIFT_MAX,
                fractional,
                count: 32,
                seed: 11 + scale as u64,
                ..GenConfig::default()
            };
            let set = generate_pairs(&cfg, &load_sources(&cfg).unwrap().0).unwrap();
            for pair in &set {
                let shift = pair.truth_shift.expect("generated pairs carry truth");
                closure[i] = closure[i].max(misaligned_l1(&pair.lr, &pair.yref, shift).unwrap());
                pairs += 1;
            }
        }
    }
    ensure(closure[0] <= CLOSURE_TOL_INTEGER, || format!("integer-shift closure {:e}", closure[0]))?;
    ensure(closure[1] <= CLOSURE_TOL_FRACTIONAL, || format!("fractional-shift closure {:e}", closure[1]))?;
    let max_oracle = worst.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "6 oracles max diff {max_oracle:.1e}; closure over {pairs} pairs: integer {:.1e}, fractional {:.1e}",
        closure[0], closure[1]
    ))
}

// 8

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let run_ok = |args: &[&str]| -> Result<(), String> {
        let o = sdan(args);
        ensure(o.status.code() == Some(0), || String::from_utf8_lossy(&o.stderr).into_owned())
    };
    let mut data = Vec::new();
    for i in 0..2 {
        let d = tmp.path().join(format!("data{i}"));
        run_ok(&[
            "--seed", "5", "gen-data", "--synthetic-sources", "2", "--out", p(&d), "--count", "8", "--scale", "2",
            "--crop", "12", "--shift-max", "2",
        ])?;
        data.push(d);
    }
    let (a, b) = (tree(&data[0]), tree(&data[1]));
    ensure(!a.is_empty() && a == b, || "datasets differ".into())?;

    let mut runs = Vec::new();
    for i in 0..2 {
        let out = tmp.path().join(format!("run{i}"));
        run_ok(&[
            "--seed", "5", "--deterministic", "train", "--data", p(&data[0]), "--val", p(&data[0]), "--out", p(&out),
            "--base-channels", "8", "--res-blocks", "1", "--pack-size", "2", "--epochs", "2", "--batch-size", "4",
            "--lr", "1e-3", "--checkpoint-every", "1",
        ])?;
        runs.push(out);
    }
    let (a, b) = (tree(&runs[0]), tree(&runs[1]));
    ensure(a.iter().any(|(f, _)| f.ends_with("loss.csv")), || "no loss.csv".into())?;
    ensure(a == b, || "training outputs differ".into())?;
    Ok(format!("{} dataset files and {} training files byte-identical", tree(&data[0]).len(), a.len()))
}

// 5 and 6

fn shift_set(count: usize, sources: usize, seed: u64) -> Vec<MisalignedPair> {
    let cfg = GenConfig {
        synthetic_sources: sources,
        scale: SCALE,
        crop_lr: CROP_LR,
        shift_max: SHIFT_MAX,
        fractional: false,
        count,
        seed,
        ..GenConfig::default()
    };
    generate_pairs(&cfg, &load_sources(&cfg).unwrap().0).unwrap()
}

fn tiny_config(offset_mode: OffsetMode, attention: AttentionKind, flip_aug: bool, align_enabled: bool) -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        base_channels: 32,
        num_res_blocks: 2,
        scale: SCALE,
        offset_mode,
        attention,
        flip_aug,
        align_enabled,
        ..ModelConfig::default()
    }
}

struct Trained {
    model: SdanModel<f32>,
    elapsed: Duration,
    psnr: f64,
    offset_error: f64,
}

fn train_and_score(cfg: ModelConfig, train_set: &[MisalignedPair], held_out: &[MisalignedPair]) -> Trained {
    let mut model = SdanModel::<f32>::new(cfg, SEED).unwrap();
    let tcfg = TrainConfig {
        epochs: STEPS * 4 / train_set.len() + 1,
        batch_size: 4,
        adam: AdamConfig { lr: LEARNING_RATE, ..AdamConfig::default() },
        seed: SEED,
        max_steps: Some(STEPS),
        val_mode: ValMode::Reference,
    };
    let t = Instant::now();
    train(&mut model, train_set, &[], &tcfg, |r, _| {
        eprintln!("  epoch {} steps {} loss {:.5} ({:.0}s)", r.epoch, r.steps, r.mean_loss, t.elapsed().as_secs_f64());
        Ok(())
    })
    .unwrap();
    let elapsed = t.elapsed();
    let summary = evaluate(&model, held_out, ValMode::Reference, false).unwrap();
    Trained {
        model,
        elapsed,
        psnr: summary.mean_psnr(),
        offset_error: summary.mean_offset_error().unwrap(),
    }
}

/// Pixels whose window centre, displaced by the true shift, lands more than
/// `BAND_TOL_PX` outside the image must be masked.
fn band_violations(model: &SdanModel<f32>, held_out: &[MisalignedPair]) -> usize {
    let mut bad = 0;
    for pair in held_out {
        let (dy, dx) = pair.truth_shift.unwrap();
        let out = forward(model, &pair.lr, &pair.yref).unwrap();
        let m = &out.mask_lr.data;
        let s = m.shape();
        let outside = |v: f64, len: usize| v < -BAND_TOL_PX || v > (len - 1) as f64 + BAND_TOL_PX;
        for y in 0..s.h {
            for x in 0..s.w {
                let vacated = outside(y as f64 + dy, s.h) || outside(x as f64 + dx, s.w);
                if vacated && m.at(0, 0, y, x) != 0.0 {
                    bad += 1;
                }
            }
        }
    }
    bad
}

fn scaled_experiments() -> (Check, Check) {
    let train_set = shift_set(TRAIN_PAIRS, 16, 101);
    let held_out = shift_set(HELD_OUT_PAIRS, 4, 202);
    let full = train_and_score(tiny_config(OffsetMode::Squared, AttentionKind::Cpa, true, true), &train_set, &held_out);
    eprintln!(
        "full: {:.1}s, psnr {:.3} dB, offset error {:.3} px",
        full.elapsed.as_secs_f64(),
        full.psnr,
        full.offset_error
    );
    let bad = band_violations(&full.model, &held_out);
    let c5 = (|| {
        let detail = format!(
            "offset error {:.3} px (tol {OFFSET_TOL_PX}), {bad} unmasked band pixels, trained {:.0}s",
            full.offset_error,
            full.elapsed.as_secs_f64()
        );
        ensure(full.elapsed <= TRAIN_BUDGET, || detail.clone())?;
        ensure(full.offset_error <= OFFSET_TOL_PX && bad == 0, || detail.clone())?;
        Ok(detail)
    })();

    let squared = train_and_score(tiny_config(OffsetMode::Squared, AttentionKind::None, false, true), &train_set, &held_out);
    eprintln!("squared-only: psnr {:.3} dB", squared.psnr);
    let none = train_and_score(tiny_config(OffsetMode::Squared, AttentionKind::None, false, false), &train_set, &held_out);
    eprintln!("align-disabled: psnr {:.3} dB", none.psnr);
    let detail = format!(
        "psnr full {:.2} dB, squared-only {:.2} dB, align-disabled {:.2} dB (gap {:.2} dB, need {MIN_ALIGN_GAIN_DB})",
        full.psnr,
        squared.psnr,
        none.psnr,
        full.psnr - none.psnr
    );
    let ordered = full.psnr > squared.psnr && squared.psnr > none.psnr;
    let c6 = if ordered && full.psnr - none.psnr >= MIN_ALIGN_GAIN_DB {
        Ok(detail)
    } else {
        Err(detail)
    };
    (c5, c6)
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let full = std::env::args().any(|a| a == "--full") || std::env::var("SDAN_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, &str, Option<Check>)> = vec![
        (1, "gradient completeness", Some(guarded(gradient_completeness))),
        (2, "zero-offset equivalence", Some(guarded(zero_offset_equivalence))),
        (3, "mode-collapse equivalence", Some(guarded(mode_collapse_equivalence))),
        (4, "pack/unpack and CPA identity", Some(guarded(packing_and_cpa_identity))),
    ];
    let (c5, c6) = if full {
        match catch_unwind(scaled_experiments) {
            Ok((a, b)) => (Some(a), Some(b)),
            Err(_) => (Some(Err("panicked".into())), Some(Err("panicked".into()))),
        }
    } else {
        (None, None)
    };
    results.push((5, "offset recovery", c5));
    results.push((6, "alignment benefit direction", c6));
    results.push((7, "loss/metric oracles", Some(guarded(loss_and_metric_oracles))));
    results.push((8, "determinism", Some(guarded(determinism))));

    let mut failed = 0;
    for (n, name, res) in &results {
        match res {
            Some(Ok(d)) => println!("criterion {n} {name}: PASS ({d})"),
            Some(Err(d)) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d})");
            }
            None => println!("criterion {n} {name}: SKIP (long training run; pass --full)"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
