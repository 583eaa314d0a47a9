use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fanet::checks::{CheckResult, Scope, TOLERANCE};
use fanet::data::netpbm::{pgm_write, ppm_read, ppm_write};
use fanet::data::{generate_split, to_sorted_json, Dataset, Split};
use fanet::enhance::enhance_rgb;
use fanet::image::quantize;
use fanet::tensor::{read_checkpoint, Tensor};
use fanet::train::{evaluate, majority_pixel_acc, run_ablation, train, write_report, TrainOutputs};
use fanet::{Graph, Segmenter, Variant};
use serde::Serialize;

use crate::config::{require, RunConfig};
use crate::{AblateArgs, DumpArgs, EnhanceArgs, EvalArgs, GenDataArgs, GradcheckArgs, TrainArgs};

fn validation(msg: impl Into<String>) -> anyhow::Error {
    fanet::Error::Validation(msg.into()).into()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let out = require(&args.out, &cfg.out, "out")?;
    if let Some(s) = args.seed {
        cfg.scene.seed = s;
    }
    if let Some(s) = args.size {
        cfg.scene.size = s;
    }
    if let Some(n) = args.train {
        cfg.splits.train = n;
    }
    if let Some(n) = args.val {
        cfg.splits.val = n;
    }
    if let Some(n) = args.test {
        cfg.splits.test = n;
    }
    cfg.out = Some(out.clone());
    let s = &cfg.splits;
    let manifest = generate_split(&cfg.scene, s.train, s.val, s.test, &out)?;
    for split in Split::ALL {
        println!(
            "{:<6}{:>6} scenes",
            split.name(),
            manifest.entries(split).len()
        );
    }
    cfg.write_resolved(&out)?;
    Ok(())
}

fn variant_toggles(cfg: &mut RunConfig, no_scm: bool, no_high: bool, no_low: bool) {
    if no_scm {
        cfg.model.scm_enabled = false;
    }
    if no_high {
        cfg.model.frm_high_freq = false;
    }
    if no_low {
        cfg.model.frm_low_freq = false;
    }
}

fn load_optional(root: &Path, split: Split) -> Result<Option<Dataset>> {
    let manifest = fanet::data::Manifest::read(root)?;
    if manifest.entries(split).is_empty() {
        return Ok(None);
    }
    Ok(Some(Dataset::load(root, split)?))
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let data = require(&args.data, &cfg.data, "data")?;
    let out = require(&args.out, &cfg.out, "out")?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.iters {
        cfg.train.max_iters = n;
    }
    if let Some(lr) = args.lr {
        cfg.train.base_lr = lr;
    }
    variant_toggles(&mut cfg, args.no_scm, args.no_frm_high, args.no_frm_low);
    cfg.data = Some(data.clone());
    cfg.out = Some(out.clone());
    cfg.train.validate()?;

    let train_set = Dataset::load(&data, Split::Train)?;
    let val_set = load_optional(&data, Split::Val)?;
    create_dir(&out)?;
    cfg.write_resolved(&out)?;

    let mut model = Segmenter::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training {} parameters for {} iterations on {} scenes",
        model.store.num_scalars(),
        cfg.train.max_iters,
        train_set.len()
    );
    let start = Instant::now();
    let log = train(
        &mut model,
        &train_set,
        val_set.as_ref(),
        &cfg.train,
        &TrainOutputs::in_dir(&out),
    )?;
    let n = log.records.len();
    let k = n.min(100);
    println!(
        "loss {:.4} -> {:.4} (mean of first/last {k} iterations), {:.1}s",
        log.mean_loss(0..k),
        log.mean_loss(n - k..n),
        start.elapsed().as_secs_f64()
    );
    if let (Some(report), Some(val)) = (log.evals.last(), &val_set) {
        print!("{}", report.table());
        println!(
            "majority-class pixel accuracy {:.4}",
            majority_pixel_acc(val, cfg.model.num_classes)
        );
        write_report(out.join("metrics_val.json"), report)?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Segmenter<f32>> {
    let ckpt = read_checkpoint(path)?;
    Ok(Segmenter::from_checkpoint(&ckpt)?)
}

pub fn eval_cmd(args: EvalArgs) -> Result<()> {
    let split = Split::parse(&args.split)
        .ok_or_else(|| validation(format!("unknown split `{}`", args.split)))?;
    let model = load_model(&args.checkpoint)?;
    let data = Dataset::load(&args.data, split)?;
    let report = evaluate(&model, &data, 0)?;
    print!("{}", report.table());
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("metrics_{}.json", split.name()))
    });
    write_report(&out, &report)?;
    println!("report written to {}", out.display());
    if let Some(dir) = args.dump_masks {
        create_dir(&dir)?;
        for (img, name) in data.images.iter().zip(&data.names) {
            let pred = model.predict(&img.to_tensor())?;
            let stem = Path::new(name)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image");
            let file = dir.join(format!("{}.pgm", stem.replacen("image", "pred", 1)));
            pgm_write(&file, img.width, img.height, &pred)?;
        }
        println!(
            "{} predicted masks written to {}",
            data.len(),
            dir.display()
        );
    }
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let data = require(&args.data, &cfg.data, "data")?;
    let out = require(&args.out, &cfg.out, "out")?;
    if let Some(seeds) = args.seeds {
        cfg.ablation.seeds = seeds;
    }
    if let Some(names) = args.variants {
        cfg.ablation.variants = names
            .iter()
            .map(|n| {
                Variant::parse(n).ok_or_else(|| validation(format!("unknown configuration `{n}`")))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(n) = args.iters {
        cfg.train.max_iters = n;
    }
    cfg.data = Some(data.clone());
    cfg.out = Some(out.clone());
    cfg.train.validate()?;

    let train_set = Dataset::load(&data, Split::Train)?;
    let val_set = Dataset::load(&data, Split::Val)?;
    create_dir(&out)?;
    cfg.write_resolved(&out)?;
    let table = run_ablation(
        &cfg.model,
        &cfg.ablation.variants,
        &cfg.train,
        &cfg.ablation.seeds,
        &train_set,
        &val_set,
        |v, seed, miou| println!("{:<10} seed {seed:<4} mIoU {miou:.4}", v.name()),
    )?;
    let csv = table.to_csv();
    let path = out.join("ablation.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    println!("{:<10}{:>18}{:>18}", "config", "mIoU", "pixel acc");
    for row in &table.rows {
        let (mm, ms) = row.miou_stats();
        let (pm, ps) = row.pixel_acc_stats();
        println!(
            "{:<10}{:>18}{:>18}",
            row.variant.name(),
            format!("{mm:.4} ± {ms:.4}"),
            format!("{pm:.4} ± {ps:.4}")
        );
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let scope = Scope::parse(args.scope.as_str()).expect("clap restricts the scope");
    let start = Instant::now();
    let results = scope.run()?;
    for r in &results {
        println!(
            "{:<34}{:>14.3e}{:>8}  {}",
            r.name,
            r.max_rel_error,
            r.coords,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .cloned()
        .unwrap_or(CheckResult {
            name: "none".into(),
            max_rel_error: 0.0,
            coords: 0,
        });
    println!(
        "worst {} {:.3e} (tolerance {TOLERANCE:e}), {:.1}s",
        worst.name,
        worst.max_rel_error,
        start.elapsed().as_secs_f64()
    );
    Ok(results.iter().all(CheckResult::passed))
}

pub fn enhance(args: EnhanceArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let input = require(&args.input, &cfg.input, "in")?;
    let out = require(&args.out, &cfg.out, "out")?;
    let p = &mut cfg.enhance;
    for (flag, field) in [
        (args.c, &mut p.c),
        (args.alpha, &mut p.alpha),
        (args.beta, &mut p.beta),
        (args.gamma, &mut p.gamma),
    ] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    p.validate()?;
    cfg.input = Some(input.clone());
    cfg.out = Some(out.clone());
    let img = ppm_read(&input)?;
    let panels = enhance_rgb(&img, &cfg.enhance)?;
    create_dir(&out)?;
    for (name, panel) in [
        ("sharpened.ppm", &panels.sharpened),
        ("contrast_map.ppm", &panels.contrast_map),
        ("contrast_enhanced.ppm", &panels.contrast_enhanced),
        ("combined.ppm", &panels.combined),
    ] {
        ppm_write(out.join(name), panel)?;
    }
    cfg.write_resolved(&out)?;
    println!("4 panels written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct HeatmapMeta {
    stage: usize,
    box_filter: bool,
    reduction: &'static str,
    /// `[min, max]` of the reduced map before normalisation, per file.
    ranges: std::collections::BTreeMap<String, [f64; 2]>,
}

/// Channel mean of absolute values, then min-max scaling to `[0, 1]`.
pub fn heatmap(t: &Tensor<f32>) -> Result<(Vec<f64>, [f64; 2], usize, usize)> {
    let [_, c, h, w] = t.dims4()?;
    let plane = h * w;
    let mut map = vec![0.0f64; plane];
    for ch in 0..c {
        for (m, &v) in map.iter_mut().zip(&t.data()[ch * plane..(ch + 1) * plane]) {
            *m += f64::from(v).abs();
        }
    }
    map.iter_mut().for_each(|m| *m /= c as f64);
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm = map
        .iter()
        .map(|&m| if span > 0.0 { (m - lo) / span } else { 0.0 })
        .collect();
    Ok((norm, [lo, hi], w, h))
}

pub fn dump_features(args: DumpArgs) -> Result<()> {
    let mut model = load_model(&args.checkpoint)?;
    let img = ppm_read(&args.input)?;
    let stage = args.stage;
    if !(1..=4).contains(&stage) {
        bail!(validation(format!("--stage {stage} is not in 1..=4")));
    }
    if args.box_filter {
        if let Some(frm) = &model.backbone.stages[stage - 1].blocks[0].frm {
            frm.clone().freeze_box_filter(&mut model.store)?;
        }
    }
    let g = Graph::<f32>::new();
    let x = g.constant(img.to_tensor());
    let trace = model.backbone.probe_frm(&g, &model.store, x, stage)?;
    create_dir(&args.out)?;
    let zeros = || Tensor::zeros(trace.f.shape());
    let maps: [(&str, Tensor<f32>); 4] = [
        ("f", (*trace.f.value()).clone()),
        ("r", trace.r.map_or_else(zeros, |v| (*v.value()).clone())),
        ("s", trace.s.map_or_else(zeros, |v| (*v.value()).clone())),
        ("fbar", (*trace.out.value()).clone()),
    ];
    let mut meta = HeatmapMeta {
        stage,
        box_filter: args.box_filter,
        reduction: "mean over channels of |value|, then min-max normalised to [0, 255]",
        ranges: Default::default(),
    };
    for (name, t) in &maps {
        let (norm, range, w, h) = heatmap(t)?;
        let bytes: Vec<u8> = norm.iter().map(|&v| quantize(v)).collect();
        let file = format!("{name}.pgm");
        pgm_write(args.out.join(&file), w, h, &bytes)?;
        meta.ranges.insert(file, range);
    }
    let path: PathBuf = args.out.join("heatmaps.json");
    fs::write(&path, to_sorted_json(&meta)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "f.pgm r.pgm s.pgm fbar.pgm written to {}",
        args.out.display()
    );
    Ok(())
}
