//! Training and evaluation loops over an in-memory dataset, and the CSV
//! reports they produce.

use crate::config::ModelConfig;
use crate::data::{batch_indices, batch_of, ImagePair};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::model::GlMamba;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{bicubic_baseline, evaluate_loss, train_step, Adam, StepLog};

pub const LOSS_CSV_HEADER: &str = "step,loss,l1_sr,l1_ref,celoss";
pub const EVAL_CSV_HEADER: &str = "image_id,psnr_db,ssim";

/// Model, parameters and optimizer of one run.
pub struct Session<S> {
    pub model: GlMamba,
    pub store: ParamStore<S>,
    pub adam: Adam<S>,
}

impl<S: Scalar> Session<S> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let (model, store) = GlMamba::init::<S>(cfg)?;
        let adam = Adam::new(cfg.lr, &store);
        Ok(Session { model, store, adam })
    }

    /// Step index of the next update.
    pub fn step(&self) -> u64 {
        self.adam.state.step
    }

    /// Runs `steps` Adam updates over consecutive minibatches of `pairs`,
    /// calling `on_step(step, log)` with each pre-update loss.
    pub fn train(&mut self, pairs: &[ImagePair], steps: usize, mut on_step: impl FnMut(u64, &StepLog)) -> Result<Vec<StepLog>> {
        if pairs.is_empty() && steps > 0 {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let b = self.model.config.batch;
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let step = self.step();
            let batch = batch_of::<S>(pairs, &batch_indices(step as usize, b, pairs.len()))?;
            let log = train_step(&self.model, &mut self.store, &mut self.adam, &batch)?;
            on_step(step, &log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Mean loss over every pair, one image at a time.
    pub fn dataset_loss(&self, pairs: &[ImagePair]) -> Result<StepLog> {
        let batches = (0..pairs.len()).map(|i| batch_of::<S>(pairs, &[i])).collect::<Result<Vec<_>>>()?;
        evaluate_loss(&self.model, &self.store, &batches)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image scores; `error_map` is `|sr - hr|`.
#[derive(Clone, Debug)]
pub struct Scored {
    pub row: EvalRow,
    pub sr: Tensor<f64>,
    pub error_map: Tensor<f64>,
}

fn score(id: &str, sr: Tensor<f64>, hr: &Tensor<f64>) -> Result<Scored> {
    let sr = sr.map(|v| v.clamp(0.0, 1.0));
    let row = EvalRow {
        id: id.to_string(),
        psnr_db: psnr(&sr, hr, 1.0)?,
        ssim: ssim(&sr, hr, 1.0)?,
    };
    let error_map = sr.zip_map(hr, |a, b| (a - b).abs())?;
    Ok(Scored { row, sr, error_map })
}

/// Scores the model on each pair, sorted by id. Outputs are clamped to
/// `[0, 1]` before scoring.
pub fn evaluate<S: Scalar>(model: &GlMamba, store: &ParamStore<S>, pairs: &[ImagePair]) -> Result<Vec<Scored>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (sr, _) = model.predict(store, &p.lr.cast::<S>(), &p.reference.cast::<S>())?;
        out.push(score(&p.id, sr.cast(), &p.hr)?);
    }
    out.sort_by(|a, b| a.row.id.cmp(&b.row.id));
    Ok(out)
}

/// Scores bicubic upsampling of the LR images.
pub fn evaluate_bicubic(pairs: &[ImagePair], scale: usize) -> Result<Vec<Scored>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        out.push(score(&p.id, bicubic_baseline(&p.lr, scale), &p.hr)?);
    }
    out.sort_by(|a, b| a.row.id.cmp(&b.row.id));
    Ok(out)
}

pub fn mean_psnr(rows: &[Scored]) -> f64 {
    rows.iter().map(|s| s.row.psnr_db).sum::<f64>() / rows.len().max(1) as f64
}

pub fn mean_ssim(rows: &[Scored]) -> f64 {
    rows.iter().map(|s| s.row.ssim).sum::<f64>() / rows.len().max(1) as f64
}

pub fn loss_csv_row(step: u64, l: &StepLog) -> String {
    format!("{step},{:.9},{:.9},{:.9},{:.9}", l.loss, l.l1_sr, l.l1_ref, l.celoss)
}

pub fn eval_csv(rows: &[Scored]) -> String {
    let mut s = String::from(EVAL_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.row.id, r.row.psnr_db, r.row.ssim));
    }
    s
}
