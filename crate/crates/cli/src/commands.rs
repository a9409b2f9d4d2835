use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glmamba::bench::{bench_csv, bench_grid, slopes};
use glmamba::checkpoint;
use glmamba::config::{KvMap, Precision};
use glmamba::data::{gen_synthetic, read_dataset, write_dataset};
use glmamba::io::{read_image, write_image, write_text};
use glmamba::model::{param_report, GlMamba};
use glmamba::pipeline::{eval_csv, evaluate, evaluate_bicubic, loss_csv_row, mean_psnr, mean_ssim, Session, LOSS_CSV_HEADER};
use glmamba::suite;
use glmamba::train::Adam;
use glmamba::Scalar;

use crate::settings::{get, model_config, require, synthetic_spec};

/// Mirror of stdout into `<out>/run.log`.
pub struct RunLog {
    file: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn open(out: Option<&Path>, command: &str, kv: &KvMap) -> Result<Self> {
        let file = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let p = dir.join("run.log");
                Some(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
            }
            None => None,
        };
        let mut log = RunLog { file };
        log.line(&format!("# glsr {command}"));
        log.line("# effective config");
        for line in kv.render().lines() {
            log.line(line);
        }
        Ok(log)
    }

    pub fn line(&mut self, s: &str) {
        println!("{s}");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{s}");
            let _ = f.flush();
        }
    }
}

fn out_dir(kv: &KvMap) -> Result<PathBuf> {
    Ok(PathBuf::from(require(kv, "out")?))
}

pub fn gen_data(kv: &KvMap, log: &mut RunLog) -> Result<()> {
    let spec = synthetic_spec(kv)?;
    let dir = out_dir(kv)?;
    let pairs = gen_synthetic(&spec)?;
    write_dataset(&dir, &pairs, &spec.to_kv())?;
    log.line(&format!("wrote {} pairs of {}x{} (scale {}) to {}", pairs.len(), spec.size, spec.size, spec.scale, dir.display()));
    Ok(())
}

pub fn train(kv: &KvMap, log: &mut RunLog) -> Result<()> {
    match model_config(kv)?.precision {
        Precision::F32 => train_as::<f32>(kv, log),
        Precision::F64 => train_as::<f64>(kv, log),
    }
}

fn train_as<S: Scalar>(kv: &KvMap, log: &mut RunLog) -> Result<()> {
    let cfg = model_config(kv)?;
    let out = out_dir(kv)?;
    let data = require(kv, "data")?;
    let steps: usize = get(kv, "steps", 2000)?;
    let every: usize = get(kv, "every", 0)?;
    let log_every: usize = get(kv, "log_every", 50)?.max(1);
    let pairs = read_dataset(data).with_context(|| format!("reading dataset {data}"))?;
    if pairs.is_empty() {
        bail!("dataset {data} is empty");
    }

    let mut session = match kv.get("resume") {
        None => Session::<S>::new(&cfg)?,
        Some(path) => {
            let (model, template) = GlMamba::init::<S>(&cfg)?;
            let ck = checkpoint::load(path, &cfg, &template).with_context(|| format!("resuming from {path}"))?;
            let adam = ck.adam.unwrap_or_else(|| Adam::new(cfg.lr, &ck.params));
            log.line(&format!("resumed {path} at step {}", adam.state.step));
            Session {
                model,
                store: ck.params,
                adam,
            }
        }
    };
    log.line(&format!("parameters {}", param_report(&session.store).total));

    let csv_path = out.join("loss.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?);
    writeln!(csv, "{LOSS_CSV_HEADER}")?;
    let mut write_err = None;
    let chunk = if every > 0 { every } else { steps.max(1) };
    let mut remaining = steps;
    while remaining > 0 {
        let n = chunk.min(remaining);
        session.train(&pairs, n, |step, l| {
            if let Err(e) = writeln!(csv, "{}", loss_csv_row(step, l)) {
                write_err.get_or_insert(e);
            }
            if step as usize % log_every == 0 {
                log.line(&format!("step {step} loss {:.6} l1_sr {:.6} l1_ref {:.6} celoss {:.6}", l.loss, l.l1_sr, l.l1_ref, l.celoss));
            }
        })?;
        remaining -= n;
        if every > 0 && remaining > 0 {
            let p = out.join(format!("checkpoint_{:06}.glck", session.step()));
            checkpoint::save(&p, &session.model.config, &session.store, Some(&session.adam))?;
            log.line(&format!("wrote {}", p.display()));
        }
    }
    if let Some(e) = write_err {
        return Err(e).context(format!("writing {}", csv_path.display()));
    }
    csv.flush()?;
    let path = out.join("checkpoint.glck");
    checkpoint::save(&path, &session.model.config, &session.store, Some(&session.adam))?;
    log.line(&format!("wrote {} after {} updates", path.display(), session.step()));
    Ok(())
}

fn open_checkpoint<S: Scalar>(kv: &KvMap) -> Result<(GlMamba, checkpoint::Checkpoint<S>)> {
    let path = require(kv, "checkpoint")?;
    checkpoint::open::<S>(path).with_context(|| format!("loading checkpoint {path}"))
}

fn checkpoint_precision(kv: &KvMap) -> Result<Precision> {
    let path = require(kv, "checkpoint")?;
    Ok(checkpoint::read_config(path).with_context(|| format!("loading checkpoint {path}"))?.precision)
}

pub fn eval(kv: &KvMap, log: &mut RunLog) -> Result<()> {
    match checkpoint_precision(kv)? {
        Precision::F32 => eval_as::<f32>(kv, log),
        Precision::F64 => eval_as::<f64>(kv, log),
    }
}

fn eval_as<S: Scalar>(kv: &KvMap, log: &mut RunLog) -> Result<()> {
    let out = out_dir(kv)?;
    let data = require(kv, "data")?;
    let (model, ck) = open_checkpoint::<S>(kv)?;
    let pairs = read_dataset(data).with_context(|| format!("reading dataset {data}"))?;
    let scored = evaluate(&model, &ck.params, &pairs)?;
    let baseline = evaluate_bicubic(&pairs, model.config.scale)?;
    write_text(out.join("metrics.csv"), &eval_csv(&scored))?;
    write_text(out.join("bicubic.csv"), &eval_csv(&baseline))?;
    let maps = out.join("error_maps");
    std::fs::create_dir_all(&maps).with_context(|| format!("creating {}", maps.display()))?;
    for s in &scored {
        write_image(maps.join(format!("{}_err.png", s.row.id)), &s.error_map)?;
    }
    log.line(&format!(
        "{} images: model psnr {:.4} dB ssim {:.4}; bicubic psnr {:.4} dB ssim {:.4}",
        scored.len(),
        mean_psnr(&scored),
        mean_ssim(&scored),
        mean_psnr(&baseline),
        mean_ssim(&baseline)
    ));
    Ok(())
}

pub fn infer(kv: &KvMap, log: &mut RunLog) -> Result<()> {
    match checkpoint_precision(kv)? {
        Precision::F32 => infer_as::<f32>(kv, log),
        Precision::F64 => infer_as::<f64>(kv, log),
    }
}

fn infer_as<S: Scalar>(kv: &KvMap, log: &mut RunLog) -> Result<()> {
    let out = out_dir(kv)?;
    let (model, ck) = open_checkpoint::<S>(kv)?;
    let lr = read_image(require(kv, "lr_image")?)?;
    let reference = read_image(require(kv, "ref_image")?)?;
    let (sr, rec) = model.predict(&ck.params, &lr.cast::<S>(), &reference.cast::<S>())?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_image(out.join("sr.png"), &sr)?;
    write_image(out.join("rec_ref.png"), &rec)?;
    log.line(&format!("wrote sr.png and rec_ref.png, shape {}, to {}", sr.shape(), out.display()));
    Ok(())
}

/// Returns the names of failed checks.
pub fn check(kv: &KvMap, log: &mut RunLog) -> Result<Vec<&'static str>> {
    let filter = kv.get("filter");
    let outcomes = suite::run(filter, |o| {
        log.line(&format!(
            "{} {:<32} {:>7.2}s  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.seconds,
            o.detail
        ))
    });
    if outcomes.is_empty() {
        bail!("no check matches filter `{}`", filter.unwrap_or(""));
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    log.line(&format!("{} passed, {} failed", outcomes.len() - failed.len(), failed.len()));
    Ok(failed)
}

pub fn bench(kv: &KvMap, log: &mut RunLog) -> Result<()> {
    let out = out_dir(kv)?;
    let grids: Vec<usize> = require_list(kv.get("grids").unwrap_or("16,32,64,128"))?;
    let channels: usize = get(kv, "bench_channels", 16)?;
    let n_state: usize = get(kv, "n_state", 16)?;
    let reps: usize = get(kv, "reps", 3)?;
    let seed: u64 = get(kv, "seed", 0)?;
    let mut rows = Vec::new();
    for &g in &grids {
        let r = bench_grid(g, channels, n_state, reps, seed)?;
        log.line(&format!("grid {g}x{g}: ss2d {:.4e}s attention {:.4e}s", r.ss2d_seconds, r.attention_seconds));
        rows.push(r);
    }
    write_text(out.join("bench.csv"), &bench_csv(&rows))?;
    if rows.len() >= 2 {
        let (s, a) = slopes(&rows);
        log.line(&format!("log-log slope in tokens: ss2d {s:.3}, attention {a:.3}"));
    }
    Ok(())
}

fn require_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().with_context(|| format!("invalid grid size `{p}`")))
        .collect()
}
