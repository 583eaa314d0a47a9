use fanet::data::{generate_scene, Dataset, SceneSpec};
use fanet::nn::ParamStore;
use fanet::train::{
    evaluate, poly_lr, train, train_with_schedule, AdamW, AdamWConfig, ConfusionMatrix,
    MetricsReport, TrainConfig, TrainOutputs, LAST_GOOD_CHECKPOINT, LOSS_CSV,
};
use fanet::{Error, FANetConfig, Graph, HeadConfig, Segmenter, Tensor};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Adam with bias correction and decoupled decay, one scalar at a time.
struct ScalarAdamW {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    wd: f64,
    m: f64,
    v: f64,
    b1_pow: f64,
    b2_pow: f64,
}

impl ScalarAdamW {
    fn step(&mut self, p: f64, g: f64) -> f64 {
        self.b1_pow *= self.b1;
        self.b2_pow *= self.b2;
        let p = p * (1.0 - self.lr * self.wd);
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1_pow);
        let v_hat = self.v / (1.0 - self.b2_pow);
        p - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

fn adam_matches_scalar_reference(weight_decay: f64, seed: u64) -> f64 {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = 6;
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let curv: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
    let start: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let cfg = AdamWConfig {
        betas: [0.9, 0.999],
        eps: 1e-8,
        weight_decay,
    };
    let lr = 0.05;

    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::new([n], start.clone()).unwrap());
    let mut opt = AdamW::new(cfg, &store);
    let mut refs: Vec<ScalarAdamW> = (0..n)
        .map(|_| ScalarAdamW {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            wd: weight_decay,
            m: 0.0,
            v: 0.0,
            b1_pow: 1.0,
            b2_pow: 1.0,
        })
        .collect();
    let mut ref_p = start;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        // f(p) = sum(curv * (p - target)^2), so df/dp = 2 curv (p - target).
        let grads = {
            let g = Graph::new();
            let p = store.var(&g, id);
            let d = p.sub(g.constant(Tensor::new([n], targets.clone()).unwrap())).unwrap();
            let w = g.constant(Tensor::new([n], curv.clone()).unwrap());
            let loss = d.mul(d).unwrap().mul(w).unwrap().sum();
            g.backward(loss).unwrap()
        };
        opt.step(&mut store, &grads, lr).unwrap();
        for i in 0..n {
            let g = 2.0 * curv[i] * (ref_p[i] - targets[i]);
            ref_p[i] = refs[i].step(ref_p[i], g);
        }
        let got = store.value(id).data();
        for i in 0..n {
            worst = worst.max((got[i] - ref_p[i]).abs());
        }
    }
    worst
}

#[test]
fn adamw_tracks_scalar_reference_for_100_steps() {
    for seed in 0..5 {
        let err = adam_matches_scalar_reference(0.0, seed);
        assert!(err < 1e-12, "seed {seed}: {err}");
        let err = adam_matches_scalar_reference(0.05, seed);
        assert!(err < 1e-12, "seed {seed} with decay: {err}");
    }
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr(0), 9e-5);
    assert_eq!(cfg.lr(cfg.max_iters), 0.0);
    assert_eq!(poly_lr(5000, 9e-5, 2000, 1.0), 0.0);
}

proptest! {
    #[test]
    fn poly_lr_is_non_increasing(max in 1usize..5000, power in 0.0f64..3.0, base in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        let step = (max / 97).max(1);
        for i in (0..=max).step_by(step).chain([max]) {
            let lr = poly_lr(i, base, max, power);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn poly_lr_is_linear_at_power_one(max in 1usize..5000, frac in 0.0f64..1.0) {
        let i = ((max as f64) * frac) as usize;
        let want = 9e-5 * (1.0 - i as f64 / max as f64);
        prop_assert!((poly_lr(i, 9e-5, max, 1.0) - want).abs() < 1e-18);
    }

    #[test]
    fn confusion_counts_every_labelled_pixel(seed in any::<u64>(), n in 0usize..400) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let truth: Vec<u8> = (0..n).map(|_| [0, 1, 2, 3, 4, 255][rng.random_range(0..6)]).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&pred, &truth, 255).unwrap();
        let labelled = truth.iter().filter(|&&t| t != 255).count() as u64;
        prop_assert_eq!(cm.total(), labelled);

        // Per-class IoU from set counts.
        let r = cm.report(0);
        let mut ious = Vec::new();
        for k in 0..5u8 {
            let mut inter = 0;
            let mut union = 0;
            for (&p, &t) in pred.iter().zip(&truth) {
                if t == 255 {
                    continue;
                }
                inter += usize::from(p == k && t == k);
                union += usize::from(p == k || t == k);
            }
            if union == 0 {
                prop_assert_eq!(r.per_class_iou[k as usize], None);
            } else {
                let iou = inter as f64 / union as f64;
                prop_assert!((r.per_class_iou[k as usize].unwrap() - iou).abs() < 1e-12);
                ious.push(iou);
            }
        }
        if !ious.is_empty() {
            let miou = ious.iter().sum::<f64>() / ious.len() as f64;
            prop_assert!((r.miou - miou).abs() < 1e-12);
        }
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64;
        if labelled > 0 {
            prop_assert!((r.pixel_acc - correct / labelled as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn hand_counted_confusion() {
    let r = ConfusionMatrix::from_rows(&[vec![3, 1], vec![1, 3]]).unwrap().report(7);
    assert!((r.miou - 0.6).abs() < 1e-12);
    assert!((r.pixel_acc - 0.75).abs() < 1e-12);
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);

    let mut perfect = ConfusionMatrix::new(3);
    perfect.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2], 255).unwrap();
    let r = perfect.report(0);
    assert_eq!((r.miou, r.pixel_acc), (1.0, 1.0));
}

fn tiny_model_config() -> FANetConfig {
    FANetConfig {
        stage_channels: [8, 16, 32, 64],
        stage_depths: [1, 1, 1, 1],
        head: HeadConfig {
            fpn_channels: 16,
            ..HeadConfig::default()
        },
        ..FANetConfig::default()
    }
}

fn tiny_data(range: std::ops::Range<u64>) -> Dataset {
    let spec = SceneSpec {
        size: 32,
        ..SceneSpec::default()
    };
    let scenes: Vec<_> = range.map(|i| generate_scene(&spec, i)).collect();
    Dataset::new(
        scenes.iter().map(|s| s.image.clone()).collect(),
        scenes.iter().map(|s| s.mask.clone()).collect(),
        (0..scenes.len()).map(|i| format!("scene{i}")).collect(),
    )
    .unwrap()
}

fn tiny_train_config(iters: usize) -> TrainConfig {
    TrainConfig {
        max_iters: iters,
        crop: 32,
        eval_interval: 0,
        base_lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_reproducible() {
    let data = tiny_data(0..6);
    let val = tiny_data(6..8);
    let cfg = tiny_train_config(12);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Segmenter::new(tiny_model_config(), cfg.seed).unwrap();
        train(&mut model, &data, Some(&val), &cfg, &TrainOutputs::in_dir(dir.path())).unwrap();
        let csv = std::fs::read(dir.path().join(LOSS_CSV)).unwrap();
        let report = evaluate(&model, &val, cfg.max_iters).unwrap();
        (csv, model.to_checkpoint().to_bytes().unwrap(), report)
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    let seq = fanet::par::sequential(run);
    assert_eq!(a, seq);

    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let mut model = Segmenter::new(tiny_model_config(), 1).unwrap();
    let log = train(&mut model, &data, None, &other, &TrainOutputs::default()).unwrap();
    assert_ne!(log.to_csv().into_bytes(), a.0);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = tiny_data(0..4);
    let cfg = tiny_train_config(10);
    let mut model = Segmenter::new(tiny_model_config(), 3).unwrap();
    let before = model.to_checkpoint().to_bytes().unwrap();
    let log = train_with_schedule(&mut model, &data, None, &cfg, &TrainOutputs::default(), |_| 0.0)
        .unwrap();
    assert_eq!(log.records.len(), 10);
    assert_eq!(model.to_checkpoint().to_bytes().unwrap(), before);
}

#[test]
fn evaluation_does_not_touch_parameters() {
    let data = tiny_data(0..3);
    let model = Segmenter::<f32>::new(tiny_model_config(), 5).unwrap();
    let before = model.to_checkpoint().to_bytes().unwrap();
    let a = evaluate(&model, &data, 0).unwrap();
    let b = evaluate(&model, &data, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.confusion.iter().flatten().sum::<u64>(), 3 * 32 * 32);
    assert_eq!(model.to_checkpoint().to_bytes().unwrap(), before);
}

#[test]
fn diverging_run_saves_last_good_state() {
    let data = tiny_data(0..4);
    let cfg = tiny_train_config(20);
    let dir = tempfile::tempdir().unwrap();
    let mut model = Segmenter::new(tiny_model_config(), 0).unwrap();
    let err = train_with_schedule(
        &mut model,
        &data,
        None,
        &cfg,
        &TrainOutputs::in_dir(dir.path()),
        |_| 1e30,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(err.to_string().contains("iteration"), "{err}");
    assert!(dir.path().join(LAST_GOOD_CHECKPOINT).exists());
    assert!(dir.path().join(LOSS_CSV).exists());
}

#[test]
fn invalid_training_settings_are_rejected() {
    let data = tiny_data(0..2);
    let mut model = Segmenter::new(tiny_model_config(), 0).unwrap();
    for cfg in [
        TrainConfig { crop: 48, ..tiny_train_config(1) },
        TrainConfig { max_iters: 0, ..tiny_train_config(1) },
        TrainConfig { base_lr: 0.0, ..tiny_train_config(1) },
        TrainConfig { crop: 64, ..tiny_train_config(1) },
    ] {
        let err = train(&mut model, &data, None, &cfg, &TrainOutputs::default()).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }
}
