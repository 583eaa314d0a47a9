//! Toggle grid over the six AFE block variants.

use std::fmt::Write as _;

use super::trainer::{evaluate, train, TrainConfig, TrainOutputs};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{FANetConfig, Segmenter, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per-seed validation scores, in seed order.
    pub miou: Vec<f64>,
    pub pixel_acc: Vec<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn miou_stats(&self) -> (f64, f64) {
        mean_std(&self.miou)
    }

    pub fn pixel_acc_stats(&self) -> (f64, f64) {
        mean_std(&self.pixel_acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,miou_mean,miou_std,pixacc_mean,pixacc_std\n");
        for r in &self.rows {
            let (mm, ms) = r.miou_stats();
            let (pm, ps) = r.pixel_acc_stats();
            writeln!(s, "{},{mm:.6},{ms:.6},{pm:.6},{ps:.6}", r.variant.name())
                .expect("write to String");
        }
        s
    }
}

/// Trains and evaluates every requested variant for every seed. Rows come out
/// in the canonical variant order regardless of the order requested.
pub fn run_ablation(
    base: &FANetConfig,
    variants: &[Variant],
    cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &Dataset,
    val_set: &Dataset,
    mut progress: impl FnMut(Variant, u64, f64),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Validation("ablation needs at least one seed".into()));
    }
    if variants.is_empty() {
        return Err(Error::Validation(
            "ablation needs at least one configuration".into(),
        ));
    }
    let mut rows = Vec::new();
    for v in Variant::ALL.into_iter().filter(|v| variants.contains(v)) {
        let model_cfg = base.clone().with_variant(v);
        let mut row = AblationRow {
            variant: v,
            miou: Vec::new(),
            pixel_acc: Vec::new(),
        };
        for &seed in seeds {
            let run = TrainConfig {
                seed,
                eval_interval: 0,
                ..cfg.clone()
            };
            let mut model = Segmenter::new(model_cfg.clone(), seed)?;
            train(&mut model, train_set, None, &run, &TrainOutputs::default())?;
            let report = evaluate(&model, val_set, run.max_iters)?;
            progress(v, seed, report.miou);
            row.miou.push(report.miou);
            row.pixel_acc.push(report.pixel_acc);
        }
        rows.push(row);
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
