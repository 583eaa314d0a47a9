//! Segmentation model: backbone, decoder and loss.
//!
//! Parameter names follow `stage{i}.block{j}.{component}.{param}` with 1-based
//! stages (matching `S1..S4`) and 0-based blocks; the stem is `stem.*` and the
//! decoder `head.*`. Checkpoints are self-describing: the architecture is
//! recovered from the tensor inventory.

mod backbone;
mod config;
mod head;
mod loss;

pub use backbone::{box_filter_weights, AfeBlock, Backbone, Frm, FrmTrace, Stage};
pub use config::{FANetConfig, HeadConfig, Variant};
pub use head::Head;
pub use loss::{argmax_channels, softmax_channels};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Checkpoint, Element, Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Segmenter<T: Element> {
    pub config: FANetConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
}

impl<T: Element> Segmenter<T> {
    pub fn new(config: FANetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, &mut rng)?;
        let head = Head::new(&mut store, &config, &mut rng)?;
        Ok(Segmenter {
            config,
            store,
            backbone,
            head,
        })
    }

    pub fn features<'g>(&self, g: &'g Graph<T>, img: Var<'g, T>) -> Result<[Var<'g, T>; 4]> {
        self.backbone.forward(g, &self.store, img)
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, img: Var<'g, T>) -> Result<Var<'g, T>> {
        let feats = self.features(g, img)?;
        self.head.forward(g, &self.store, &feats)
    }

    pub fn loss<'g>(&self, g: &'g Graph<T>, img: Var<'g, T>, target: &[u8]) -> Result<Var<'g, T>> {
        self.forward(g, img)?
            .cross_entropy(target, self.config.head.ignore_index)
    }

    /// Logits without recording gradients.
    pub fn logits(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let x = g.constant(img.clone());
        Ok((*self.forward(&g, x)?.value()).clone())
    }

    pub fn predict(&self, img: &Tensor<T>) -> Result<Vec<u8>> {
        argmax_channels(&self.logits(img)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = infer_config(ckpt)?;
        let mut model = Self::new(config, 0)?;
        model.store.load_checkpoint(ckpt)?;
        Ok(model)
    }

    pub fn cast<U: Element>(&self) -> Segmenter<U> {
        Segmenter {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }
}

fn shape_of<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a [usize]> {
    ckpt.get(name)
        .map(|t| t.shape())
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

/// Recovers the architecture from tensor names and shapes.
pub fn infer_config(ckpt: &Checkpoint) -> Result<FANetConfig> {
    let stem = shape_of(ckpt, "stem.weight")?;
    let mut cfg = FANetConfig {
        in_channels: stem[1],
        ..FANetConfig::default()
    };
    cfg.stage_channels[0] = stem[0];
    for i in 1..4 {
        cfg.stage_channels[i] = shape_of(ckpt, &format!("stage{}.downsample.weight", i + 1))?[0];
    }
    for i in 0..4 {
        cfg.stage_depths[i] = (0..)
            .take_while(|j| {
                ckpt.get(&format!("stage{}.block{j}.norm1.gamma", i + 1))
                    .is_some()
            })
            .count();
    }
    let hidden = shape_of(ckpt, "stage1.block0.mlp_in.weight")?[0];
    cfg.mlp_ratio = hidden / cfg.stage_channels[0];
    cfg.scm_enabled = ckpt.get("stage1.block0.scm.weight").is_some();
    cfg.frm_high_freq = ckpt.get("stage1.block0.frm.dw_r.weight").is_some();
    cfg.frm_low_freq = ckpt.get("stage1.block0.frm.dw_s.weight").is_some();
    let cls = shape_of(ckpt, "head.classifier.weight")?;
    cfg.num_classes = cls[0];
    cfg.head.fpn_channels = cls[1];
    cfg.head.ppm_bins = ckpt
        .names()
        .filter_map(|n| {
            n.strip_prefix("head.ppm.bin")?
                .strip_suffix(".weight")?
                .parse()
                .ok()
        })
        .collect();
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("inferred architecture is invalid: {e}")))?;
    Ok(cfg)
}
