use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sdan_core::checkpoint;
use sdan_core::gradcheck::{self, GradcheckConfig, Precision};
use sdan_core::io::{quantize_8bit, read_image, read_sdtn, write_gray_png, write_image, write_sdtn};
use sdan_core::model::{forward, AdamConfig, AttentionKind, ModelConfig, SdanModel};
use sdan_core::synth::{self, bayer_pack, DataMode, GenConfig, MisalignedPair};
use sdan_core::train::{self, score_pair, zoom_pairs, EpochRecord, EvalSummary, PairMetrics, TrainConfig, ValMode};
use sdan_core::{OffsetMode, Result, SdanError, Tensor};

use crate::args::{
    AttentionArg, Cli, Command, EvalArgs, GenArgs, GradcheckArgs, ImageFormat, InferArgs, Mode, OffsetModeArg, Switch,
    TrainArgs, ValModeArg,
};
use crate::EXIT_GRADCHECK;

fn banner(command: &str, threads: usize, seed: u64, items: &[(&str, String)]) {
    eprintln!("sdan {command}");
    eprintln!("  seed = {seed}");
    eprintln!("  threads = {threads}");
    for (k, v) in items {
        eprintln!("  {k} = {v}");
    }
}

fn io_err(path: &Path, e: std::io::Error) -> SdanError {
    SdanError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Removes an output directory this process created unless the command
/// finished.
struct OutputDir {
    path: PathBuf,
    created: bool,
    done: bool,
}

impl OutputDir {
    fn create(path: &Path) -> Result<Self> {
        let created = !path.exists();
        fs::create_dir_all(path).map_err(|e| io_err(path, e))?;
        Ok(OutputDir {
            path: path.to_path_buf(),
            created,
            done: false,
        })
    }

    fn finish(mut self) {
        self.done = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.created && !self.done {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}

pub fn run(cli: Cli, threads: usize) -> Result<u8> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(a, seed, threads),
        Command::Train(a) => train_cmd(a, seed, threads),
        Command::Infer(a) => infer_cmd(a, seed, threads),
        Command::Eval(a) => eval_cmd(a, seed, threads),
        Command::Gradcheck(a) => gradcheck_cmd(a, seed, threads),
    }
}

fn gen_data(a: GenArgs, seed: u64, threads: usize) -> Result<u8> {
    let cfg = GenConfig {
        source_dir: a.src.clone(),
        synthetic_sources: a.synthetic_sources,
        scale: a.scale,
        crop_lr: a.crop,
        shift_max: a.shift_max,
        fractional: a.fractional,
        count: a.count,
        seed,
        mode: match a.mode {
            Mode::Rgb => DataMode::Rgb,
            Mode::Raw => DataMode::Raw,
        },
    };
    banner(
        "gen-data",
        threads,
        seed,
        &[
            ("src", a.src.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("synthetic_sources", cfg.synthetic_sources.to_string()),
            ("out", a.out.display().to_string()),
            ("count", cfg.count.to_string()),
            ("scale", cfg.scale.to_string()),
            ("crop", cfg.crop_lr.to_string()),
            ("shift_max", cfg.shift_max.to_string()),
            ("fractional", cfg.fractional.to_string()),
            ("mode", cfg.mode.to_string()),
        ],
    );
    cfg.validate()?;
    let (sources, warnings) = synth::load_sources(&cfg)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let pairs = synth::generate_pairs(&cfg, &sources)?;
    let out = OutputDir::create(&a.out)?;
    synth::write_dataset(&a.out, &pairs)?;
    out.finish();

    let shifts: Vec<(f64, f64)> = pairs.iter().filter_map(|p| p.truth_shift).collect();
    println!("pairs: {}", pairs.len());
    if !shifts.is_empty() {
        let n = shifts.len() as f64;
        let mean = |f: fn(&(f64, f64)) -> f64| shifts.iter().map(f).sum::<f64>() / n;
        let max_abs = |f: fn(&(f64, f64)) -> f64| shifts.iter().map(|s| f(s).abs()).fold(0.0, f64::max);
        let mag = shifts.iter().map(|(y, x)| (y * y + x * x).sqrt()).sum::<f64>() / n;
        println!("shift dy: mean {:.4} max|.| {:.4}", mean(|s| s.0), max_abs(|s| s.0));
        println!("shift dx: mean {:.4} max|.| {:.4}", mean(|s| s.1), max_abs(|s| s.1));
        println!("shift magnitude: mean {mag:.4}");
    }
    Ok(0)
}

/// `(offset mode, attention, flip augmentation)` for each ablation row.
fn preset(name: &str) -> Result<(OffsetMode, AttentionKind, bool)> {
    Ok(match name {
        "table2-row-1" => (OffsetMode::PerPoint, AttentionKind::None, false),
        "table2-row-2" => (OffsetMode::Squared, AttentionKind::None, false),
        "table2-row-3" => (OffsetMode::Squared, AttentionKind::Channel, false),
        "table2-row-4" => (OffsetMode::Squared, AttentionKind::Cpa, false),
        "table2-row-5" => (OffsetMode::Squared, AttentionKind::Cpa, true),
        other => {
            return Err(SdanError::Config(format!(
                "unknown preset '{other}' (expected table2-row-1 .. table2-row-5)"
            )))
        }
    })
}

fn dataset_geometry(pairs: &[MisalignedPair], what: &str) -> Result<(usize, usize)> {
    let first = pairs
        .first()
        .ok_or_else(|| SdanError::Config(format!("{what} dataset is empty")))?;
    let geom = (first.lr.shape().c, first.scale);
    if pairs.iter().any(|p| (p.lr.shape().c, p.scale) != geom || p.lr.shape() != first.lr.shape()) {
        return Err(SdanError::Config(format!("{what} dataset mixes pair shapes or scales")));
    }
    Ok(geom)
}

fn model_config(a: &TrainArgs, in_channels: usize, scale: usize) -> Result<ModelConfig> {
    let (mut offset_mode, mut attention, mut flip_aug) = (OffsetMode::Squared, AttentionKind::Cpa, true);
    if let Some(p) = &a.preset {
        (offset_mode, attention, flip_aug) = preset(p)?;
    }
    if let Some(m) = a.offset_mode {
        offset_mode = match m {
            OffsetModeArg::Squared => OffsetMode::Squared,
            OffsetModeArg::PerPoint => OffsetMode::PerPoint,
        };
    }
    if let Some(k) = a.attention {
        attention = match k {
            AttentionArg::None => AttentionKind::None,
            AttentionArg::Channel => AttentionKind::Channel,
            AttentionArg::Cpa => AttentionKind::Cpa,
        };
    }
    if let Some(f) = a.flip_aug {
        flip_aug = f == Switch::On;
    }
    let cfg = ModelConfig {
        in_channels,
        base_channels: a.base_channels,
        num_res_blocks: a.res_blocks,
        scale,
        offset_mode,
        attention,
        flip_aug,
        align_enabled: !a.no_align,
        pack_size: a.pack_size,
        reduction: a.reduction,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn val_mode(v: ValModeArg) -> ValMode {
    match v {
        ValModeArg::Reference => ValMode::Reference,
        ValModeArg::SelfRef => ValMode::SelfRef,
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn train_cmd(a: TrainArgs, seed: u64, threads: usize) -> Result<u8> {
    let train_pairs = synth::load_dataset(&a.data)?;
    let (in_channels, scale) = dataset_geometry(&train_pairs, "training")?;
    let val_pairs = match &a.val {
        Some(v) => {
            let pairs = synth::load_dataset(v)?;
            let first = &train_pairs[0];
            if dataset_geometry(&pairs, "validation")? != (in_channels, scale) || pairs[0].hr.shape().c != first.hr.shape().c {
                return Err(SdanError::Config("validation data does not match the training data".into()));
            }
            pairs
        }
        None => Vec::new(),
    };
    let cfg = model_config(&a, in_channels, scale)?;
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed,
        max_steps: a.max_steps,
        val_mode: val_mode(a.val_mode),
    };
    let mut items: Vec<(&str, String)> = vec![
        ("data", a.data.display().to_string()),
        ("val", a.val.as_ref().map_or("-".into(), |p| p.display().to_string())),
        ("out", a.out.display().to_string()),
        ("preset", a.preset.clone().unwrap_or_else(|| "-".into())),
    ];
    let model_text = cfg.to_text();
    for line in model_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            items.push((k.trim(), v.trim().to_string()));
        }
    }
    items.extend([
        ("lr", tcfg.adam.lr.to_string()),
        ("epochs", tcfg.epochs.to_string()),
        ("batch_size", tcfg.batch_size.to_string()),
        ("max_steps", tcfg.max_steps.map_or("-".into(), |m| m.to_string())),
        ("checkpoint_every", a.checkpoint_every.to_string()),
        ("val_mode", tcfg.val_mode.to_string()),
        ("train_pairs", train_pairs.len().to_string()),
        ("val_pairs", val_pairs.len().to_string()),
    ]);
    banner("train", threads, seed, &items);

    let mut model = SdanModel::<f32>::new(cfg, seed)?;
    eprintln!("  parameters = {}", model.params.num_parameters());
    let out = OutputDir::create(&a.out)?;
    let csv_path = a.out.join("loss.csv");
    let mut csv = String::from("epoch,steps,mean_loss,val_psnr,val_ssim,val_offset_error\n");
    let started = Instant::now();
    let mut best: Option<(usize, f64, f64)> = None;
    let records = train::train(&mut model, &train_pairs, &val_pairs, &tcfg, |r: &EpochRecord, m| {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{},{},{}",
            r.epoch,
            r.steps,
            r.mean_loss,
            opt_cell(r.val_psnr),
            opt_cell(r.val_ssim),
            opt_cell(r.val_offset_error)
        );
        fs::write(&csv_path, &csv).map_err(|e| io_err(&csv_path, e))?;
        if let (Some(p), Some(s)) = (r.val_psnr, r.val_ssim) {
            if best.is_none_or(|(_, bp, _)| p > bp) {
                best = Some((r.epoch, p, s));
            }
        }
        eprintln!(
            "epoch {} steps {} loss {:.6} val_psnr {} ({:.1}s)",
            r.epoch,
            r.steps,
            r.mean_loss,
            opt_cell(r.val_psnr),
            started.elapsed().as_secs_f64()
        );
        if a.checkpoint_every > 0 && r.epoch.is_multiple_of(a.checkpoint_every) {
            checkpoint::save(m, &a.out.join("checkpoints").join(format!("epoch-{:04}", r.epoch)))?;
        }
        Ok(())
    })?;
    if records.is_empty() {
        fs::write(&csv_path, &csv).map_err(|e| io_err(&csv_path, e))?;
    }
    checkpoint::save(&model, &a.out.join("final"))?;
    out.finish();

    let last = records.last();
    println!(
        "epochs {} steps {} final_loss {}",
        records.len(),
        last.map_or(0, |r| r.steps),
        last.map_or("-".into(), |r| format!("{:.6}", r.mean_loss))
    );
    match best {
        Some((epoch, p, s)) => println!("best validation: epoch {epoch} psnr {p:.4} dB ssim {s:.4}"),
        None => println!("best validation: none (no validation set)"),
    }
    Ok(0)
}

fn read_input(path: &Path) -> Result<Tensor<f32>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("sdtn")) {
        read_sdtn(path)
    } else {
        read_image(path)
    }
}

/// Bring an input to the model's channel layout.
fn model_input(t: Tensor<f32>, cfg: &ModelConfig, path: &Path) -> Result<Tensor<f32>> {
    let c = t.shape().c;
    if t.shape().n != 1 {
        return Err(SdanError::Dimension(format!("{}: expected one image, got batch {}", path.display(), t.shape().n)));
    }
    match (c, cfg.in_channels) {
        (a, b) if a == b => Ok(t),
        (3, 4) => bayer_pack(&t),
        _ => Err(SdanError::Dimension(format!(
            "{}: {c} channels, model expects {}",
            path.display(),
            cfg.in_channels
        ))),
    }
}

fn infer_cmd(a: InferArgs, seed: u64, threads: usize) -> Result<u8> {
    let model = checkpoint::load(&a.checkpoint)?;
    let fmt = match a.format {
        ImageFormat::Png => "png",
        ImageFormat::Ppm => "ppm",
    };
    banner(
        "infer",
        threads,
        seed,
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("inputs", a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")),
            ("reference", a.reference.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("out", a.out.display().to_string()),
            ("format", fmt.into()),
            ("dump_offsets", a.dump_offsets.to_string()),
            ("dump_mask", a.dump_mask.to_string()),
        ],
    );
    let reference = match &a.reference {
        Some(p) => Some(model_input(read_input(p)?, &model.config, p)?),
        None => None,
    };
    let out = OutputDir::create(&a.out)?;
    for path in &a.inputs {
        let x = model_input(read_input(path)?, &model.config, path)?;
        let r = reference.as_ref().unwrap_or(&x);
        let res = forward(&model, &x, r)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "output".into());
        let dst = a.out.join(format!("{stem}.{fmt}"));
        write_image(&dst, &res.zoomed)?;
        let s = res.zoomed.shape();
        println!("{} -> {} ({}x{})", path.display(), dst.display(), s.w, s.h);
        if a.dump_offsets {
            write_sdtn(&a.out.join(format!("{stem}.offsets.sdtn")), &res.offsets.center_offsets())?;
        }
        if a.dump_mask {
            let m = &res.mask_hr.data;
            let ms = m.shape();
            write_gray_png(&a.out.join(format!("{stem}.mask.png")), m.plane(0, 0), ms.h, ms.w)?;
        }
    }
    out.finish();
    Ok(0)
}

fn prediction_path(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["png", "ppm"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(io_err(
        &dir.join(format!("{id}.png")),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no prediction for this pair"),
    ))
}

fn metrics_csv(summary: &EvalSummary) -> String {
    let with_offset = summary.mean_offset_error().is_some();
    let mut s = String::from("id,psnr_db,ssim,cx_distance");
    if with_offset {
        s.push_str(",offset_error");
    }
    s.push('\n');
    let row = |s: &mut String, id: &str, p: f64, q: f64, cx: Option<f64>, off: Option<f64>| {
        let _ = write!(s, "{id},{p:.6},{q:.6},{}", opt_cell(cx));
        if with_offset {
            let _ = write!(s, ",{}", opt_cell(off));
        }
        s.push('\n');
    };
    for r in &summary.rows {
        row(&mut s, &r.id, r.psnr_db, r.ssim, r.cx_distance, r.offset_error);
    }
    row(
        &mut s,
        "mean",
        summary.mean_psnr(),
        summary.mean_ssim(),
        summary.mean_cx(),
        summary.mean_offset_error(),
    );
    s
}

fn eval_cmd(a: EvalArgs, seed: u64, threads: usize) -> Result<u8> {
    let pairs = synth::load_dataset(&a.data)?;
    let mode = val_mode(a.val_mode);
    banner(
        "eval",
        threads,
        seed,
        &[
            ("data", a.data.display().to_string()),
            ("checkpoint", a.checkpoint.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("predictions", a.predictions.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("out", a.out.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("dump_images", a.dump_images.to_string()),
            ("val_mode", mode.to_string()),
            ("pairs", pairs.len().to_string()),
        ],
    );
    let out = a.out.as_deref().map(OutputDir::create).transpose()?;
    let rows: Vec<PairMetrics> = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let model = checkpoint::load(ckpt)?;
            let zoomed = zoom_pairs(&model, &pairs, mode)?;
            let images = a.out.as_ref().filter(|_| a.dump_images).map(|o| o.join("images"));
            if let Some(dir) = &images {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            pairs
                .iter()
                .zip(&zoomed)
                .map(|(p, z)| {
                    // score what a written image would hold
                    let img = quantize_8bit(&z.image);
                    if let Some(dir) = &images {
                        write_image(&dir.join(format!("{}.png", p.id)), &img)?;
                    }
                    score_pair(p, &img, Some(z.mean_offset), true)
                })
                .collect::<Result<_>>()?
        }
        (None, Some(dir)) => pairs
            .iter()
            .map(|p| {
                let path = prediction_path(dir, &p.id)?;
                let img = read_image(&path)?;
                if img.shape() != p.hr.shape() {
                    return Err(SdanError::Dimension(format!(
                        "{}: {} does not match hr {}",
                        path.display(),
                        img.shape(),
                        p.hr.shape()
                    )));
                }
                score_pair(p, &img, None, true)
            })
            .collect::<Result<_>>()?,
        (None, None) => return Err(SdanError::Config("eval needs --checkpoint or --predictions".into())),
    };
    let summary = EvalSummary { rows };
    let csv = metrics_csv(&summary);
    match &a.out {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
            println!(
                "pairs {} mean psnr {:.4} dB ssim {:.4}{}",
                summary.rows.len(),
                summary.mean_psnr(),
                summary.mean_ssim(),
                summary
                    .mean_offset_error()
                    .map_or(String::new(), |e| format!(" offset_error {e:.4}"))
            );
        }
        None => print!("{csv}"),
    }
    if let Some(o) = out {
        o.finish();
    }
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs, seed: u64, threads: usize) -> Result<u8> {
    let cfg = GradcheckConfig {
        precision: if a.f64 { Precision::F64 } else { Precision::F32 },
        trials: a.trials,
        seed,
        filter: a.op.clone(),
        fault: a.inject_fault.clone(),
    };
    banner(
        "gradcheck",
        threads,
        seed,
        &[
            ("precision", if a.f64 { "f64" } else { "f32" }.into()),
            ("op", a.op.clone().unwrap_or_else(|| "all".into())),
            ("trials", a.trials.to_string()),
        ],
    );
    let started = Instant::now();
    let reports = gradcheck::run(&cfg)?;
    println!("{:<24} {:>6} {:>8} {:>8} {:>12} {:>9}  status", "op", "trials", "checked", "skipped", "max_rel_err", "tol");
    for r in &reports {
        println!(
            "{:<24} {:>6} {:>8} {:>8} {:>12.3e} {:>9.0e}  {}",
            r.op,
            r.trials,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    eprintln!("gradcheck finished in {:.1}s", started.elapsed().as_secs_f64());
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    if failing.is_empty() {
        Ok(0)
    } else {
        println!("failing ops: {}", failing.join(", "));
        Ok(EXIT_GRADCHECK)
    }
}
