use fanet::checks::{self, TOLERANCE};
use fanet::model::{softmax_channels, AfeBlock, Frm};
use fanet::nn::ParamStore;
use fanet::tensor::grad_check;
use fanet::{FANetConfig, Graph, Segmenter, Tensor, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

fn box_frm(channels: usize, high: bool, low: bool) -> (Frm, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let frm = Frm::new(&mut store, "frm", channels, high, low, &mut rng).unwrap();
    frm.freeze_box_filter(&mut store).unwrap();
    (frm, store)
}

fn checkerboard(c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn([1, c, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        if (x + y) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    })
}

#[test]
fn frm_constant_input_has_no_detail() {
    let (frm, store) = box_frm(4, true, true);
    let g = Graph::new();
    let t = frm
        .forward_traced(&g, &store, g.constant(Tensor::full([1, 4, 8, 10], 0.7)))
        .unwrap();
    assert!(t.r.unwrap().value().max_abs() < 1e-6);
    // S is the square of the constant.
    let s = t.s.unwrap().value();
    assert!(s.data().iter().all(|&v| (v - 0.49).abs() < 1e-12));
}

#[test]
fn frm_checkerboard_has_no_blob_response() {
    let (frm, store) = box_frm(4, true, true);
    let g = Graph::new();
    let f = checkerboard(4, 12, 16);
    let t = frm.forward_traced(&g, &store, g.constant(f.clone())).unwrap();
    assert!(t.p.value().max_abs() < 1e-12);
    assert!(t.s.unwrap().value().max_abs() < 1e-6);
    let r = t.r.unwrap().value();
    assert!(r.max_abs_diff(&f).unwrap() < 1e-12);
}

#[test]
fn frm_high_only_constant_output_is_zero_with_zero_biases() {
    let (frm, mut store) = box_frm(2, true, false);
    for conv in [frm.dw_r.as_ref().unwrap(), &frm.proj] {
        store.set(conv.bias.unwrap(), Tensor::zeros([2])).unwrap();
    }
    let g = Graph::new();
    let out = frm
        .forward(&g, &store, g.constant(Tensor::full([1, 2, 6, 6], 3.0)))
        .unwrap();
    assert_eq!(out.value().max_abs(), 0.0);
}

#[test]
fn frm_without_branches_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    assert!(Frm::new(&mut store, "frm", 4, false, false, &mut rng).is_err());
}

fn feature_sizes(model: &Segmenter<f32>, size: usize) -> Vec<Vec<usize>> {
    let g = Graph::new();
    let x = g.constant(Tensor::full([1, 3, size, size], 0.5));
    model
        .features(&g, x)
        .unwrap()
        .iter()
        .map(|f| f.shape())
        .collect()
}

#[test]
fn feature_pyramid_shapes() {
    let model = Segmenter::<f32>::new(FANetConfig::default(), 0).unwrap();
    assert_eq!(
        feature_sizes(&model, 64),
        [[1, 32, 16, 16], [1, 64, 8, 8], [1, 128, 4, 4], [1, 256, 2, 2]]
    );
    let big = feature_sizes(&model, 512);
    let spatial: Vec<_> = big.iter().map(|s| (s[2], s[3])).collect();
    assert_eq!(spatial, [(128, 128), (64, 64), (32, 32), (16, 16)]);

    let deep = FANetConfig {
        stage_depths: [2, 2, 4, 2],
        ..FANetConfig::default()
    };
    let deep = Segmenter::<f32>::new(deep, 0).unwrap();
    assert_eq!(feature_sizes(&deep, 64), feature_sizes(&model, 64));
}

#[test]
fn indivisible_input_is_rejected() {
    let model = Segmenter::<f32>::new(FANetConfig::default(), 0).unwrap();
    let g = Graph::new();
    let err = model
        .forward(&g, g.constant(Tensor::zeros([1, 3, 48, 64])))
        .unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");
}

#[test]
fn head_restores_input_resolution() {
    let model = Segmenter::<f32>::new(FANetConfig::default(), 3).unwrap();
    for (h, w) in [(32, 32), (64, 96), (96, 32)] {
        let logits = model.logits(&Tensor::full([2, 3, h, w], 0.3)).unwrap();
        assert_eq!(logits.shape(), &[2, 5, h, w]);
        let p = softmax_channels(&logits).unwrap();
        for i in 0..2 * h * w {
            let (b, px) = (i / (h * w), i % (h * w));
            let s: f32 = (0..5).map(|k| p.data()[(b * 5 + k) * h * w + px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn features_are_bit_identical_across_builds() {
    let a = Segmenter::<f32>::new(FANetConfig::default(), 9).unwrap();
    let b = Segmenter::<f32>::new(FANetConfig::default(), 9).unwrap();
    let x = Tensor::from_fn([1, 3, 64, 64], |i| ((i * 31) % 97) as f32 / 97.0);
    let run = |m: &Segmenter<f32>| {
        let g = Graph::new();
        let f = m.features(&g, g.constant(x.clone())).unwrap();
        f.iter().map(|v| (*v.value()).clone()).collect::<Vec<_>>()
    };
    let (fa, fb) = (run(&a), run(&b));
    for (p, q) in fa.iter().zip(&fb) {
        assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    let seq = fanet::par::sequential(|| run(&a));
    for (p, q) in fa.iter().zip(&seq) {
        assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn toggles_control_parameter_inventory() {
    let names = |v: Variant| -> Vec<String> {
        let m = Segmenter::<f32>::new(FANetConfig::default().with_variant(v), 0).unwrap();
        m.to_checkpoint().names().map(str::to_string).collect()
    };
    let has = |ns: &[String], part: &str| ns.iter().any(|n| n.contains(part));
    let scm = names(Variant::Scm);
    assert!(has(&scm, ".scm.") && !has(&scm, ".frm."));
    let frm = names(Variant::FrmBoth);
    assert!(!has(&frm, ".scm.") && has(&frm, ".frm.dw_r") && has(&frm, ".frm.dw_s"));
    let high = names(Variant::FrmHigh);
    assert!(has(&high, ".frm.dw_r") && !has(&high, ".frm.dw_s"));
    let low = names(Variant::FrmLow);
    assert!(!has(&low, ".frm.dw_r") && has(&low, ".frm.dw_s"));
    let base = names(Variant::Baseline);
    assert!(!has(&base, ".scm.") && !has(&base, ".frm."));
    let full = names(Variant::Full);
    assert!(has(&full, ".scm.") && has(&full, ".frm.dw_r") && has(&full, ".frm.dw_s"));
}

#[test]
fn checkpoint_restores_architecture_and_weights() {
    for v in Variant::ALL {
        let m = Segmenter::<f32>::new(FANetConfig::default().with_variant(v), 4).unwrap();
        let ckpt = m.to_checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FANT");
        let back = fanet::tensor::Checkpoint::from_bytes(&bytes).unwrap();
        let restored = Segmenter::<f32>::from_checkpoint(&back).unwrap();
        assert_eq!(restored.config, m.config);
        assert_eq!(restored.to_checkpoint().to_bytes().unwrap(), bytes);
    }
}

#[test]
fn fresh_block_is_identity() {
    for v in Variant::ALL {
        let cfg = FANetConfig::default().with_variant(v);
        let mut store = ParamStore::<f64>::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let block = AfeBlock::new(&mut store, "b", 8, &cfg, &mut rng).unwrap();
        let x = checks::seeded(&[1, 8, 5, 7], 2);
        let g = Graph::new();
        let y = block.forward(&g, &store, g.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x, "{v:?}");
    }
}

#[test]
fn odd_block_width_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    assert!(AfeBlock::new(&mut store, "b", 7, &FANetConfig::default(), &mut rng).is_err());
}

#[test]
fn gradient_suites_pass() {
    for r in checks::ops_suite()
        .unwrap()
        .into_iter()
        .chain(checks::block_suite().unwrap())
        .chain(checks::model_suite().unwrap())
    {
        assert!(r.max_rel_error < TOLERANCE, "{r:?}");
    }
}

#[test]
fn deepest_features_are_differentiable() {
    let cfg = FANetConfig {
        stage_depths: [1, 1, 1, 1],
        ..FANetConfig::default()
    };
    let mut model = Segmenter::<f64>::new(cfg, 5).unwrap();
    model.store.randomize(6, 0.15);
    let x = checks::seeded(&[1, 3, 32, 32], 7).map(|v| 0.5 + 0.25 * v);
    let r = grad_check(
        |xv| Ok(model.features(xv.graph(), xv)?[3].sum()),
        &x,
        checks::STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < TOLERANCE, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_preserve_shape(
        half in 1usize..=128, h in 2usize..=64, w in 2usize..=64, vi in 0usize..6,
    ) {
        let c = 2 * half;
        let cfg = FANetConfig::default().with_variant(Variant::ALL[vi]);
        let mut store = ParamStore::<f32>::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(c as u64);
        let block = AfeBlock::new(&mut store, "b", c, &cfg, &mut rng).unwrap();
        store.randomize(3, 0.1);
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn([1, c, h, w], |i| (i % 13) as f32 / 13.0));
        let y = block.forward(&g, &store, x).unwrap();
        prop_assert_eq!(y.shape(), vec![1, c, h, w]);
    }

    #[test]
    fn loss_is_class_permutation_equivariant(seed in any::<u64>(), shift in 1usize..5) {
        let logits = checks::seeded(&[2, 5, 3, 4], seed);
        let target: Vec<u8> = (0..24).map(|i| [0, 1, 2, 3, 4, 255][(i * 7 + seed as usize) % 6]).collect();
        let perm = |k: usize| (k + shift) % 5;
        let mut moved = vec![0.0; logits.numel()];
        for b in 0..2 {
            for k in 0..5 {
                for p in 0..12 {
                    moved[(b * 5 + perm(k)) * 12 + p] = logits.data()[(b * 5 + k) * 12 + p];
                }
            }
        }
        let moved = Tensor::new([2, 5, 3, 4], moved).unwrap();
        let moved_target: Vec<u8> = target
            .iter()
            .map(|&t| if t == 255 { t } else { perm(t as usize) as u8 })
            .collect();
        let g = Graph::new();
        let a = g.constant(logits).cross_entropy(&target, 255).unwrap().value().data()[0];
        let b = g.constant(moved).cross_entropy(&moved_target, 255).unwrap().value().data()[0];
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_reference_values() {
    let g = Graph::new();
    let uniform = g.constant(Tensor::<f64>::zeros([1, 5, 2, 2]));
    let l = uniform.cross_entropy(&[0, 1, 2, 3], 255).unwrap();
    assert!((l.value().data()[0] - 5f64.ln()).abs() < 1e-12);

    let mut sharp = vec![0.0; 5 * 4];
    for p in 0..4 {
        sharp[2 * 4 + p] = 1000.0;
    }
    let sharp = g.constant(Tensor::new([1, 5, 2, 2], sharp).unwrap());
    assert!(sharp.cross_entropy(&[2; 4], 255).unwrap().value().data()[0] < 1e-6);

    // Hand-summed softmax and NLL over non-ignored pixels.
    let x = checks::seeded(&[2, 5, 4, 4], 8);
    let mut target: Vec<u8> = (0..32).map(|i| (i % 5) as u8).collect();
    for i in [3, 17, 30] {
        target[i] = 255;
    }
    let mut total = 0.0;
    let mut count = 0;
    for b in 0..2 {
        for p in 0..16 {
            let t = target[b * 16 + p];
            if t == 255 {
                continue;
            }
            let z: Vec<f64> = (0..5).map(|k| x.data()[(b * 5 + k) * 16 + p]).collect();
            let norm: f64 = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += norm - z[t as usize];
            count += 1;
        }
    }
    let l = g.constant(x).cross_entropy(&target, 255).unwrap();
    assert!((l.value().data()[0] - total / count as f64).abs() < 1e-10);
}

#[test]
fn fully_ignored_target_has_zero_loss_and_gradient() {
    let x = checks::seeded(&[1, 5, 3, 3], 1);
    let g = Graph::new();
    let xv = g.leaf(x, true);
    let loss = xv.cross_entropy(&[255; 9], 255).unwrap();
    assert_eq!(loss.value().data()[0], 0.0);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(xv).is_none_or(|t| t.max_abs() == 0.0));
}

#[test]
fn out_of_range_label_is_rejected() {
    let g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros([1, 5, 1, 2]));
    assert!(x.cross_entropy(&[1, 5], 255).is_err());
}
