use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use oracle_attn::mask::{composite_valid, gen_hole_mask, load_irregular_mask, Mask};
use oracle_attn::metrics::{score_image, EvalReport};
use oracle_attn::nn::masked_input;
use oracle_attn::train::{mask_seed, Checkpoint, LossReport, Sample, Trainer};
use oracle_attn::{Error, Scalar, Tensor};

use crate::bench::{self, BenchReport};
use crate::config::{Precision, RunConfig};
use crate::fail::{Fail, Outcome};
use crate::io::{self, LANDMARKS_REQUIRED};
use crate::model::Model;

pub const LOSS_CSV: &str = "loss.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_TEXT: &str = "eval.txt";
pub const BENCH_JSON: &str = "bench.json";

/// Salt of the fixed masks drawn for the sample grids.
const SAMPLE_SALT: u64 = 0x5a4d_504c;
const SAMPLE_ROWS: usize = 4;

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}.oatt"))
}

pub fn sample_path(out: &Path, step: u64) -> PathBuf {
    out.join("samples").join(format!("step_{step:06}.png"))
}

pub fn train(cfg: &RunConfig) -> Outcome<()> {
    with_precision!(cfg, train_as(cfg))
}

fn train_as<T: Scalar>(cfg: &RunConfig) -> Outcome<()> {
    let tc = cfg.train_config()?;
    let dir = cfg
        .data
        .dir
        .as_deref()
        .ok_or_else(|| Fail::Usage("data.dir is required".into()))?;
    let lm = cfg
        .data
        .landmarks
        .as_deref()
        .ok_or_else(|| Fail::Usage(format!("{LANDMARKS_REQUIRED} (set data.landmarks)")))?;
    let landmarks = io::load_landmarks(lm)?;
    let side = tc.preset.side();
    let data = io::load_dataset::<T>(dir, &landmarks, side)?;
    if data.len() < tc.batch_size {
        warn!(
            "{} images for batch size {}; images repeat within a batch",
            data.len(),
            tc.batch_size
        );
    }
    let mut trainer = Trainer::<T>::new(tc.clone()).map_err(|e| Fail::Usage(e.to_string()))?;
    if let Some(path) = &cfg.train.resume {
        let ck =
            Checkpoint::load(path).map_err(|e| Fail::Data(format!("{}: {e}", path.display())))?;
        trainer
            .restore(&ck)
            .map_err(|e| Fail::Data(format!("{}: {e}", path.display())))?;
        info!("resumed from {} at step {}", path.display(), trainer.step);
    }
    let out = &cfg.output_dir;
    cfg.write_resolved()?;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("samples"))?;
    let csv_path = out.join(LOSS_CSV);
    let fresh = cfg.train.resume.is_none() || !csv_path.exists();
    let mut csv = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&csv_path)?;
    if fresh {
        writeln!(csv, "{}", LossReport::CSV_HEADER)?;
    }

    info!(
        "training {} ({}) on {} images from step {} to {}",
        tc.preset,
        T::NAME,
        data.len(),
        trainer.step,
        tc.max_steps
    );
    while trainer.step < tc.max_steps {
        match trainer.train_on(&data) {
            Ok(r) => {
                writeln!(csv, "{}", r.csv_row())?;
                if r.step % 10 == 0 {
                    info!(
                        "step {:>6}  total {:.5}  recon {:.5}  critic {:.5}",
                        r.step, r.total, r.recon, r.critic
                    );
                }
            }
            Err(e @ Error::Halted { .. }) => {
                csv.flush()?;
                return Err(Fail::Numeric(e.to_string()));
            }
            Err(Error::NonFinite(m)) => warn!("step {} skipped: non-finite {m}", trainer.step - 1),
            Err(e) => return Err(e.into()),
        }
        if trainer.step % tc.checkpoint_every == 0 || trainer.step == tc.max_steps {
            csv.flush()?;
            let path = checkpoint_path(out, trainer.step);
            trainer.to_checkpoint().save(&path)?;
            write_samples(&trainer, &data, &sample_path(out, trainer.step))?;
            info!("checkpoint {}", path.display());
        }
    }
    Ok(())
}

/// Rows of masked input | output | composite | ground truth.
fn write_samples<T: Scalar>(trainer: &Trainer<T>, data: &[Sample<T>], path: &Path) -> Outcome<()> {
    let side = trainer.side();
    let mut rows = Vec::new();
    for (i, s) in data.iter().take(SAMPLE_ROWS).enumerate() {
        let mask = gen_hole_mask(
            mask_seed(trainer.config.seed ^ SAMPLE_SALT, 0, i),
            side,
            &trainer.config.mask_mode,
        )?;
        let out = trainer.generator.infer(&s.image, &[&mask])?;
        let masked = masked_input(&s.image, &[&mask])?;
        let rgb = Tensor::new(
            &[1, 3, side, side],
            masked.data()[..3 * side * side].to_vec(),
        )?;
        let comp = composite_valid(&out, &s.image, &mask)?;
        rows.push(vec![rgb, out, comp, s.image.clone()]);
    }
    io::save_image(&io::grid(&rows)?, path)
}

/// Hole mask for the `index`-th input: a same-named file in `mask_dir`
/// when present, otherwise drawn from the configured mode.
fn input_mask(cfg: &RunConfig, index: usize, name: &str, side: usize) -> Outcome<Mask> {
    if let Some(dir) = &cfg.infer.mask_dir {
        let p = dir.join(name);
        if p.exists() {
            return Ok(load_irregular_mask(&p, side)?);
        }
    }
    Ok(gen_hole_mask(
        mask_seed(cfg.seed, 0, index),
        side,
        &cfg.mask_mode()?,
    )?)
}

fn model_spec<'a>(spec: &'a Option<String>, what: &str) -> Outcome<&'a str> {
    spec.as_deref().ok_or_else(|| {
        Fail::Usage(format!(
            "{what}.checkpoint is required (a path, mock:identity or mock:gray)"
        ))
    })
}

pub fn infer(cfg: &RunConfig) -> Outcome<()> {
    with_precision!(cfg, infer_as(cfg))
}

fn infer_as<T: Scalar>(cfg: &RunConfig) -> Outcome<()> {
    let preset = cfg.preset()?;
    let side = preset.side();
    let spec = model_spec(&cfg.infer.checkpoint, "infer")?;
    let dir = cfg
        .data
        .dir
        .as_deref()
        .ok_or_else(|| Fail::Usage("data.dir is required".into()))?;
    cfg.mask_mode()?;
    let model = Model::<T>::open(spec, preset)?;
    let files = io::list_pngs(dir)?;
    if files.is_empty() {
        return Err(Fail::Data(format!("no PNG images in {}", dir.display())));
    }
    cfg.write_resolved()?;
    let mut failed = 0;
    for (i, path) in files.iter().enumerate() {
        let name = io::file_name(path);
        let run = || -> Outcome<()> {
            let img = io::load_image::<T>(path, side)?;
            let mask = input_mask(cfg, i, &name, side)?;
            let out = model.complete(&img, &[&mask])?;
            let comp = composite_valid(&out, &img, &mask)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            io::save_image(&out, &cfg.output_dir.join(format!("{stem}_output.png")))?;
            io::save_image(&comp, &cfg.output_dir.join(format!("{stem}_composite.png")))
        };
        if let Err(e) = run() {
            error!("{name}: {e}");
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Fail::Data(format!(
            "{failed} of {} images failed",
            files.len()
        )));
    }
    Ok(())
}

/// Score every image of `data.dir` with seed-determined masks.
pub fn evaluate_set<T: Scalar>(cfg: &RunConfig) -> Outcome<EvalReport> {
    let preset = cfg.preset()?;
    let side = preset.side();
    let spec = model_spec(&cfg.eval.checkpoint, "eval")?;
    let dir = cfg
        .data
        .dir
        .as_deref()
        .ok_or_else(|| Fail::Usage("data.dir is required".into()))?;
    let mode = cfg.mask_mode()?;
    let model = Model::<T>::open(spec, preset)?;
    let landmarks = cfg
        .data
        .landmarks
        .as_deref()
        .map(io::load_landmarks)
        .transpose()?;
    let mut scores = Vec::new();
    for (i, path) in io::list_pngs(dir)?.iter().enumerate() {
        let name = io::file_name(path);
        if landmarks.as_ref().is_some_and(|l| !l.contains_key(&name)) {
            warn!("{name}: no landmarks, skipped");
            continue;
        }
        let img = io::load_image::<T>(path, side)?;
        let mask = gen_hole_mask(mask_seed(cfg.seed, 0, i), side, &mode)?;
        let out = model.complete(&img, &[&mask])?;
        scores.push(score_image(&name, &out, &img, &mask)?);
    }
    if scores.is_empty() {
        return Err(Fail::Data(format!(
            "evaluation set {} is empty",
            dir.display()
        )));
    }
    Ok(EvalReport::from_images(cfg.mask.mode.clone(), scores)?)
}

pub fn eval(cfg: &RunConfig) -> Outcome<EvalReport> {
    let report = with_precision!(cfg, evaluate_set(cfg))?;
    cfg.write_resolved()?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(cfg.output_dir.join(EVAL_JSON), json + "\n")?;
    fs::write(cfg.output_dir.join(EVAL_TEXT), report.to_table())?;
    print!("{}", report.to_table());
    Ok(report)
}

pub fn bench_dsa(cfg: &RunConfig) -> Outcome<BenchReport> {
    let preset = cfg.preset()?;
    let b = &cfg.bench;
    let report = match cfg.precision {
        Precision::F32 => bench::run::<f32>(preset, b.side, b.iterations, b.warmup, cfg.seed),
        Precision::F64 => bench::run::<f64>(preset, b.side, b.iterations, b.warmup, cfg.seed),
    }?;
    cfg.write_resolved()?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(cfg.output_dir.join(BENCH_JSON), json + "\n")?;
    print!("{}", report.to_text());
    Ok(report)
}
