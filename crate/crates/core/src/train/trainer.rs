//! Seeded mini-batch training and full-image evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::metrics::{ConfusionMatrix, MetricsReport};
use super::optim::{poly_lr, AdamW, AdamWConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::tensor::{write_checkpoint, Graph, Tensor};

/// Separates the sampling stream from the initialisation stream of the same seed.
const SAMPLER_SALT: u64 = 0x5452_4149_4E5F_5346;

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub max_iters: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Seeds both the model initialisation and the batch sampler.
    pub seed: u64,
    /// Iterations between checkpoints (and validation passes when a
    /// validation split is supplied); 0 disables both.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 9e-5,
            max_iters: 2000,
            poly_power: 1.0,
            batch_size: 2,
            crop: 64,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            eval_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.max_iters == 0 {
            return fail("max_iters must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(32) {
            return fail(format!(
                "crop {} must be a positive multiple of 32",
                self.crop
            ));
        }
        if !(self.poly_power >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return fail(
                "poly_power, weight_decay and eps must be non-negative (eps positive)".into(),
            );
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        Ok(())
    }

    pub fn lr(&self, iter: usize) -> f64 {
        poly_lr(iter, self.base_lr, self.max_iters, self.poly_power)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
    /// Validation reports taken every `eval_interval` iterations.
    pub evals: Vec<MetricsReport>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss\n");
        for r in &self.records {
            writeln!(s, "{},{:e},{}", r.iter, r.lr, r.loss).expect("write to String");
        }
        s
    }

    /// Mean loss over records `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let xs = &self.records[range];
        xs.iter().map(|r| r.loss).sum::<f64>() / xs.len() as f64
    }
}

/// Where training artifacts go; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        TrainOutputs {
            dir: Some(dir.into()),
        }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(p) = self.path(name) {
            fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, model: &Segmenter<f32>) -> Result<Option<PathBuf>> {
        match self.path(name) {
            Some(p) => {
                write_checkpoint(&p, &model.to_checkpoint())?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }
}

/// Random crops and flips drawn from one seeded stream.
struct Sampler {
    rng: Xoshiro256PlusPlus,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        let mut s = Sampler {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed ^ SAMPLER_SALT),
            order: (0..n).collect(),
            cursor: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        // Fisher-Yates, written out so the draw sequence is fixed here.
        for i in (1..self.order.len()).rev() {
            let j = self.rng.random_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.reshuffle();
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn batch(&mut self, data: &Dataset, size: usize, crop: usize) -> (Tensor<f32>, Vec<u8>) {
        let plane = crop * crop;
        let mut img = vec![0f32; size * 3 * plane];
        let mut target = vec![0u8; size * plane];
        for b in 0..size {
            let i = self.next_index();
            let y0 = self.rng.random_range(0..=data.height - crop);
            let x0 = self.rng.random_range(0..=data.width - crop);
            let flip = self.rng.random::<bool>();
            let src = &data.images[i];
            let mask = &data.masks[i];
            for y in 0..crop {
                for x in 0..crop {
                    let sx = x0 + if flip { crop - 1 - x } else { x };
                    let sy = y0 + y;
                    let p = src.pixel(sx, sy);
                    for c in 0..3 {
                        img[(b * 3 + c) * plane + y * crop + x] = p[c] as f32;
                    }
                    target[b * plane + y * crop + x] = mask[sy * data.width + sx];
                }
            }
        }
        let t = Tensor::new([size, 3, crop, crop], img).expect("batch buffer sized above");
        (t, target)
    }
}

/// Full-image evaluation; argmax ties go to the lowest class id.
pub fn evaluate(
    model: &Segmenter<f32>,
    data: &Dataset,
    iters_seen: usize,
) -> Result<MetricsReport> {
    let k = model.config.num_classes;
    let ignore = model.config.head.ignore_index;
    data.check_labels(k, ignore)?;
    let mut cm = ConfusionMatrix::new(k);
    for (img, mask) in data.images.iter().zip(&data.masks) {
        let pred = model.predict(&img.to_tensor())?;
        cm.accumulate(&pred, mask, ignore)?;
    }
    Ok(cm.report(iters_seen))
}

/// Accuracy of always predicting the most frequent class of `data`.
pub fn majority_pixel_acc(data: &Dataset, num_classes: usize) -> f64 {
    let h = data.class_histogram(num_classes);
    let total: u64 = h.iter().sum();
    if total == 0 {
        return 0.0;
    }
    *h.iter().max().expect("num_classes > 0") as f64 / total as f64
}

/// Trains with the configured polynomial schedule.
pub fn train(
    model: &mut Segmenter<f32>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<TrainLog> {
    cfg.validate()?;
    train_with_schedule(model, data, val, cfg, out, |i| cfg.lr(i))
}

/// Training loop with an explicit learning rate per iteration.
///
/// On a non-finite loss the parameters from before that iteration are written
/// to `last_good.ckpt` and the run stops with [`Error::NonFinite`].
pub fn train_with_schedule(
    model: &mut Segmenter<f32>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out: &TrainOutputs,
    lr_at: impl Fn(usize) -> f64,
) -> Result<TrainLog> {
    let k = model.config.num_classes;
    let ignore = model.config.head.ignore_index;
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    data.check_labels(k, ignore)?;
    if cfg.crop > data.width || cfg.crop > data.height {
        return Err(Error::Validation(format!(
            "crop {} exceeds image size {}x{}",
            cfg.crop, data.width, data.height
        )));
    }
    if let Some(d) = &out.dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut sampler = Sampler::new(cfg.seed, data.len());
    let mut opt = AdamW::new(cfg.adamw(), &model.store);
    let mut log = TrainLog::default();
    for iter in 0..cfg.max_iters {
        let lr = lr_at(iter);
        let (img, target) = sampler.batch(data, cfg.batch_size, cfg.crop);
        let g = Graph::without_finite_checks();
        let x = g.constant(img);
        let loss = model.loss(&g, x, &target)?;
        let value = f64::from(loss.value().data()[0]);
        if !value.is_finite() {
            out.write(LOSS_CSV, &log.to_csv())?;
            let saved = out.checkpoint(LAST_GOOD_CHECKPOINT, model)?;
            let place = saved.map_or_else(
                || "not saved (no output directory)".to_string(),
                |p| format!("saved to {}", p.display()),
            );
            return Err(Error::NonFinite(format!(
                "loss is {value} at iteration {iter}; last good state {place}"
            )));
        }
        let grads = g.backward(loss)?;
        opt.step(&mut model.store, &grads, lr)?;
        log.records.push(LossRecord {
            iter,
            lr,
            loss: value,
        });

        let done = iter + 1;
        if cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done < cfg.max_iters {
            out.checkpoint(&format!("checkpoint_{done:05}.ckpt"), model)?;
            if let Some(v) = val {
                log.evals.push(evaluate(model, v, done)?);
            }
        }
    }
    if let Some(v) = val {
        log.evals.push(evaluate(model, v, cfg.max_iters)?);
    }
    out.write(LOSS_CSV, &log.to_csv())?;
    out.checkpoint(FINAL_CHECKPOINT, model)?;
    Ok(log)
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let path = path.as_ref();
    let text = crate::data::to_sorted_json(report)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
