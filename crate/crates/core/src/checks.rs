//! Finite-difference gradient suites, in double precision with `h = 1e-5`.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::Result;
use crate::model::{AfeBlock, FANetConfig, Segmenter};
use crate::nn::ParamStore;
use crate::tensor::{concat_channels, grad_check, ConvSpec, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(&mut rng))
}

/// Weighted sum with fixed pseudo-random weights, so that every output
/// coordinate contributes a distinct amount to the objective.
pub fn probe<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = y.graph().constant(seeded(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

fn run<F>(out: &mut Vec<CheckResult>, name: &str, x: &Tensor<f64>, f: F) -> Result<()>
where
    F: for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let r = grad_check(f, x, STEP)?;
    out.push(CheckResult {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        coords: r.coords,
    });
    Ok(())
}

/// Every differentiable primitive, with respect to each differentiable input.
pub fn ops_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let x = seeded(&[2, 4, 5, 5], 1);
    let other = seeded(&[2, 4, 5, 5], 2);

    run(&mut out, "add", &x, |v| {
        probe(v.add(v.graph().constant(other.clone()))?, 9)
    })?;
    run(&mut out, "sub", &x, |v| {
        probe(v.graph().constant(other.clone()).sub(v)?, 9)
    })?;
    run(&mut out, "mul", &x, |v| {
        probe(v.mul(v.graph().constant(other.clone()))?, 9)
    })?;
    run(&mut out, "mul_self", &x, |v| Ok(v.mul(v)?.sum()))?;
    run(&mut out, "scale", &x, |v| probe(v.scale(-1.7), 9))?;
    run(&mut out, "gelu", &x, |v| probe(v.gelu(), 9))?;
    run(&mut out, "mean", &x, |v| Ok(v.mul(v)?.mean()))?;
    run(&mut out, "concat_channels", &x, |v| {
        let c = v.graph().constant(other.clone());
        probe(concat_channels(&[c, v, v])?, 9)
    })?;
    run(&mut out, "slice_channels", &x, |v| {
        probe(v.slice_channels(1, 2)?, 9)
    })?;

    let gamma = seeded(&[4], 3);
    let beta = seeded(&[4], 4);
    run(&mut out, "layer_norm.x", &x, |v| {
        let g = v.graph();
        probe(
            v.layer_norm(g.constant(gamma.clone()), g.constant(beta.clone()))?,
            9,
        )
    })?;
    run(&mut out, "layer_norm.gamma", &gamma, |gm| {
        let g = gm.graph();
        probe(
            g.constant(x.clone())
                .layer_norm(gm, g.constant(beta.clone()))?,
            9,
        )
    })?;
    run(&mut out, "layer_norm.beta", &beta, |b| {
        let g = b.graph();
        probe(
            g.constant(x.clone())
                .layer_norm(g.constant(gamma.clone()), b)?,
            9,
        )
    })?;

    let convs = [
        ("conv2d.dense", ConvSpec::new(4, 6, 3, 1, 1, 1)?),
        ("conv2d.grouped_strided", ConvSpec::new(4, 6, 3, 2, 1, 2)?),
        ("conv2d.depthwise", ConvSpec::depthwise(4, 3)?),
        ("conv2d.depthwise_large", ConvSpec::depthwise(4, 7)?),
        ("conv2d.pointwise", ConvSpec::pointwise(4, 3)?),
        ("conv2d.stem_like", ConvSpec::new(4, 2, 5, 4, 2, 1)?),
    ];
    for (i, (name, spec)) in convs.into_iter().enumerate() {
        let w = seeded(&spec.weight_shape(), 10 + i as u64);
        let b = seeded(&[spec.out_channels], 20 + i as u64);
        run(&mut out, &format!("{name}.x"), &x, |v| {
            let g = v.graph();
            probe(
                v.conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), &spec)?,
                9,
            )
        })?;
        run(&mut out, &format!("{name}.weight"), &w, |wv| {
            let g = wv.graph();
            probe(
                g.constant(x.clone())
                    .conv2d(wv, Some(g.constant(b.clone())), &spec)?,
                9,
            )
        })?;
        run(&mut out, &format!("{name}.bias"), &b, |bv| {
            let g = bv.graph();
            probe(
                g.constant(x.clone())
                    .conv2d(g.constant(w.clone()), Some(bv), &spec)?,
                9,
            )
        })?;
    }

    run(&mut out, "bilinear_resize.up", &x, |v| {
        probe(v.bilinear_resize(11, 8)?, 9)
    })?;
    run(&mut out, "bilinear_resize.down", &x, |v| {
        probe(v.bilinear_resize(3, 2)?, 9)
    })?;
    run(&mut out, "adaptive_avg_pool", &x, |v| {
        probe(v.adaptive_avg_pool(3, 2)?, 9)
    })?;

    let target: Vec<u8> = (0..2 * 25).map(|i| [0, 1, 2, 3, 255][i % 5]).collect();
    run(&mut out, "cross_entropy", &x, |v| {
        v.cross_entropy(&target, 255)
    })?;

    let chain_x = seeded(&[1, 4, 6, 6], 5);
    let spec = ConvSpec::new(4, 4, 3, 1, 1, 1)?;
    let w = seeded(&spec.weight_shape(), 6).map(|v| v * 0.3);
    run(&mut out, "conv2d_gelu_layer_norm", &chain_x, |v| {
        let g = v.graph();
        let y = v.conv2d(g.constant(w.clone()), None, &spec)?.gelu();
        // Unit gamma and zero beta would make the channel sum identically 0.
        let gamma = g.constant(seeded(&[4], 7));
        let beta = g.constant(seeded(&[4], 8));
        Ok(y.layer_norm(gamma, beta)?.sum())
    })?;
    Ok(out)
}

/// One AFE block per toggle combination, checked end to end on a 1x8x6x6
/// input with randomised parameters.
pub fn block_suite() -> Result<Vec<CheckResult>> {
    use crate::model::Variant;
    let mut out = Vec::new();
    let x = seeded(&[1, 8, 6, 6], 31);
    for v in Variant::ALL {
        let config = FANetConfig::default().with_variant(v);
        let mut store = ParamStore::<f64>::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(32);
        let block = AfeBlock::new(&mut store, "block", 8, &config, &mut rng)?;
        store.randomize(33, 0.3);
        run(&mut out, &format!("afe_block.{}", v.name()), &x, |xv| {
            let g = xv.graph();
            probe(block.forward(g, &store, xv)?, 34)
        })?;
    }
    Ok(out)
}

/// Cross-entropy of the full default model on a 1x3x32x32 input, with respect
/// to the input image.
pub fn model_suite() -> Result<Vec<CheckResult>> {
    let mut model = Segmenter::<f64>::new(FANetConfig::default(), 41)?;
    model.store.randomize(42, 0.15);
    let x = seeded(&[1, 3, 32, 32], 43).map(|v| 0.5 + 0.25 * v);
    let target: Vec<u8> = (0..32 * 32).map(|i| ((i / 7) % 5) as u8).collect();
    let mut out = Vec::new();
    run(&mut out, "model.cross_entropy", &x, |xv| {
        model.loss(xv.graph(), xv, &target)
    })?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Block,
    Model,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ops" => Some(Scope::Ops),
            "block" => Some(Scope::Block),
            "model" => Some(Scope::Model),
            _ => None,
        }
    }

    pub fn run(self) -> Result<Vec<CheckResult>> {
        match self {
            Scope::Ops => ops_suite(),
            Scope::Block => block_suite(),
            Scope::Model => model_suite(),
        }
    }
}
